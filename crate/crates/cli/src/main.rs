//! `baryloc`: generate networks, verify localizability, localize, run whole
//! scenarios and replay stored ones.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use baryloc::collective::Backend;
use baryloc::graph::{generate_random_geometric, read_network, write_network, AnchorRule};
use baryloc::localization::{localize, LocalizationProblem};
use baryloc::pipeline::{
    json_to, localization_json, prepare, run_on_network, run_scenario, write_file, write_positions, PipelineRun,
    SCENARIO_FILE,
};
use baryloc::scenario::{Scenario, ScenarioFile};
use baryloc::verification::{localizable_subgraph, verify_localizability, Orthonormalization};
use baryloc::{Configuration, NodeId, SensorNetwork};

const OUT_DIR_ENV: &str = "BARYLOC_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "baryloc-out";
/// Artifacts compared by `replay --check`; timing.json holds wall time.
const REPRODUCIBLE: [&str; 5] = ["network.txt", "verdicts.json", "trace.csv", "positions.csv", "summary.json"];

#[derive(Parser)]
#[command(name = "baryloc", version, about = "Distributed finite-time 3D localization with barycentric coordinates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random geometric network and write network.txt
    Generate(ScenarioArgs),
    /// Verify localizability on a stored network and write verdicts.json
    Verify(NetworkArgs),
    /// Localize a stored network and write positions.csv and localization.json
    Localize {
        #[command(flatten)]
        net: NetworkArgs,
        /// verdicts.json to take the localizable set from instead of verifying again
        #[arg(long)]
        verdicts: Option<PathBuf>,
    },
    /// Generate, verify, localize and compare with the baselines
    Run(ScenarioArgs),
    /// Rerun the pipeline on a stored network
    Replay {
        #[command(flatten)]
        net: NetworkArgs,
        /// fail unless every reproducible artifact equals the one stored next to the network
        #[arg(long)]
        check: bool,
    },
}

/// Scenario keys as flags; each overrides the config key of the same name.
#[derive(Args, Default)]
struct ScenarioArgs {
    /// scenario file (flat TOML with a `# baryloc-scenario v1` header)
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    box_side: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    anchor_rule: Option<AnchorRule>,
    #[arg(long, short)]
    k: Option<usize>,
    #[arg(long)]
    epsilon1: Option<f64>,
    #[arg(long)]
    epsilon2: Option<f64>,
    #[arg(long)]
    iter_max: Option<usize>,
    #[arg(long)]
    orthonormalization: Option<Orthonormalization>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    cg_max_iter: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    baseline_iters: Option<usize>,
    #[arg(long)]
    min_quality: Option<f64>,
    #[arg(long)]
    backend: Option<Backend>,
    /// output directory; falls back to the config key, then $BARYLOC_OUT_DIR, then ./baryloc-out
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct NetworkArgs {
    /// network.txt; the scenario.toml next to it is the default config
    network: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

impl ScenarioArgs {
    fn overrides(&self) -> ScenarioFile {
        let mut f = ScenarioFile::default();
        f.n = self.n;
        f.box_side = self.box_side;
        f.radius = self.radius;
        f.seed = self.seed;
        f.anchor_rule = self.anchor_rule;
        f.k = self.k;
        f.epsilon1 = self.epsilon1;
        f.epsilon2 = self.epsilon2;
        f.iter_max = self.iter_max;
        f.orthonormalization = self.orthonormalization;
        f.tol = self.tol;
        f.cg_max_iter = self.cg_max_iter;
        f.gamma = self.gamma;
        f.omega = self.omega;
        f.baseline_iters = self.baseline_iters;
        f.min_quality = self.min_quality;
        f.backend = self.backend;
        f.output_dir = self.output_dir.clone();
        f
    }

    /// The config file (or `fallback` when none is given) with the flags on top.
    fn file(&self, fallback: Option<&Path>) -> Result<ScenarioFile> {
        let path = self.config.as_deref().or(fallback.filter(|p| p.exists()));
        let base = match path {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ScenarioFile::parse(&text).with_context(|| format!("{}", path.display()))?
            }
            None => ScenarioFile::default(),
        };
        Ok(base.merge(self.overrides()))
    }

    fn resolve(&self) -> Result<Scenario> {
        let file = self.file(None)?;
        file.resolve().with_context(|| self.config_name())
    }

    fn config_name(&self) -> String {
        match &self.config {
            Some(p) => format!("invalid scenario {}", p.display()),
            None => "invalid scenario flags".to_string(),
        }
    }
}

impl NetworkArgs {
    /// The stored network and the scenario to run on it; `n` always comes
    /// from the network.
    fn load(&self) -> Result<(Scenario, Configuration, SensorNetwork)> {
        let text = fs::read_to_string(&self.network).with_context(|| format!("reading {}", self.network.display()))?;
        let (config, net) =
            read_network(text.as_bytes()).with_context(|| format!("parsing {}", self.network.display()))?;
        let beside = self.network.with_file_name(SCENARIO_FILE);
        let mut file = self.scenario.file(Some(&beside))?;
        file.n = Some(net.n());
        let scenario = file.resolve().with_context(|| self.scenario.config_name())?;
        Ok((scenario, config, net))
    }
}

fn output_dir(scenario: &Scenario) -> PathBuf {
    scenario
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn write_scenario(dir: &Path, scenario: &Scenario) -> Result<()> {
    write_file(&dir.join(SCENARIO_FILE), |w| w.write_all(scenario.to_file_text().as_bytes()))?;
    Ok(())
}

fn generate(args: &ScenarioArgs) -> Result<()> {
    let scenario = args.resolve()?;
    let (config, net) = generate_random_geometric(&scenario.generation()).context("generation")?;
    let dir = output_dir(&scenario);
    let path = dir.join("network.txt");
    write_file(&path, |w| write_network(w, &net, &config))?;
    write_scenario(&dir, &scenario)?;
    println!("network: {} nodes, {} edges, anchors {:?}", net.n(), net.edge_count(), net.anchors().map(|a| a.0));
    println!("wrote {}", path.display());
    Ok(())
}

fn verify(args: &NetworkArgs) -> Result<()> {
    let (scenario, config, net) = args.load()?;
    let prepared = prepare(&scenario, &config, &net)?;
    let report =
        verify_localizability(&prepared.pruned, &prepared.cliques, &scenario.verification()).context("verification")?;
    let path = output_dir(&scenario).join("verdicts.json");
    write_file(&path, |w| json_to(w, &report.to_json()))?;
    println!(
        "verification: {} free, {} unlocalizable {:?}, {} iterations, converged {}",
        report.n_f(),
        report.unlocalizable().len(),
        report.unlocalizable().iter().map(|id| id.0).collect::<Vec<_>>(),
        report.iterations,
        report.converged
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Localizable nodes listed in a verdicts document.
fn read_localizable(path: &Path) -> Result<BTreeSet<NodeId>> {
    #[derive(serde::Deserialize)]
    struct Doc {
        format: String,
        verdicts: Vec<Entry>,
    }
    #[derive(serde::Deserialize)]
    struct Entry {
        node: u32,
        localizable: bool,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: Doc = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if doc.format != baryloc::verification::VERDICT_FORMAT {
        bail!(
            "{}: expected format `{}`, found `{}`",
            path.display(),
            baryloc::verification::VERDICT_FORMAT,
            doc.format
        );
    }
    Ok(doc.verdicts.iter().filter(|v| v.localizable).map(|v| NodeId(v.node)).collect())
}

fn localize_cmd(args: &NetworkArgs, verdicts: Option<&Path>) -> Result<()> {
    let (scenario, config, net) = args.load()?;
    let prepared = prepare(&scenario, &config, &net)?;
    let localizable = match verdicts {
        Some(path) => read_localizable(path)?,
        None => {
            let report = verify_localizability(&prepared.pruned, &prepared.cliques, &scenario.verification())
                .context("verification")?;
            localizable_subgraph(&prepared.pruned, &report).context("verification")?
        }
    };
    let problem =
        LocalizationProblem::new(&prepared.pruned, &prepared.cliques, &localizable, &config).context("localization")?;
    let result = localize(&problem, &scenario.localization(), Some(&config)).context("localization")?;
    let dir = output_dir(&scenario);
    write_file(&dir.join("positions.csv"), |w| write_positions(w, &result, &config))?;
    write_file(&dir.join("localization.json"), |w| json_to(w, &localization_json(&result, &config)))?;
    println!(
        "localization: n_z {}, {} iterations ({:?}), rounds {} of bound {}, relative error {:.2e}",
        result.n_z(),
        result.iterations,
        result.termination,
        result.rounds,
        result.round_bound,
        result.relative_error(&config)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn report_run(run: &PipelineRun, dir: &Path) {
    let v = &run.verification;
    let l = &run.localization;
    let at = l.iterations;
    let ratio = |s: &[f64]| s.get(at).map_or("n/a".to_string(), |r| format!("{r:.2e}"));
    println!(
        "network: {} nodes, {} pruned, {} cliques admitted of {}",
        run.network.n(),
        run.removed.len(),
        run.cliques.len(),
        run.cliques_found
    );
    println!(
        "verification: {} free, {} unlocalizable {:?}, {} iterations",
        v.n_f(),
        v.unlocalizable().len(),
        v.unlocalizable().iter().map(|id| id.0).collect::<Vec<_>>(),
        v.iterations
    );
    println!(
        "localization: n_z {}, {} iterations ({:?}), rounds {} of bound {}, relative error {:.2e}",
        l.n_z(),
        l.iterations,
        l.termination,
        l.rounds,
        l.round_bound,
        l.relative_error(&run.config)
    );
    println!(
        "error ratio at iteration {at}: CG {}, RI {}, JU {}",
        ratio(&l.error_ratio),
        ratio(&run.richardson.error_ratio),
        ratio(&run.jacobi.error_ratio)
    );
    println!("wrote {}", dir.display());
}

fn run_cmd(args: &ScenarioArgs) -> Result<()> {
    let scenario = args.resolve()?;
    let run = run_scenario(&scenario)?;
    let dir = output_dir(&scenario);
    run.write_artifacts(&dir)?;
    report_run(&run, &dir);
    Ok(())
}

fn replay(args: &NetworkArgs, check: bool) -> Result<()> {
    let (scenario, config, net) = args.load()?;
    let run = run_on_network(&scenario, config, net)?;
    let dir = output_dir(&scenario);
    run.write_artifacts(&dir)?;
    report_run(&run, &dir);
    if check {
        let stored = args.network.parent().unwrap_or(Path::new("."));
        let mut differing = Vec::new();
        for name in REPRODUCIBLE {
            let old =
                fs::read(stored.join(name)).with_context(|| format!("reading {}", stored.join(name).display()))?;
            if old != fs::read(dir.join(name))? {
                differing.push(name);
            }
        }
        if !differing.is_empty() {
            bail!("replay differs from {} in {}", stored.display(), differing.join(", "));
        }
        println!("replay matches {}", stored.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Verify(a) => verify(a),
        Command::Localize { net, verdicts } => localize_cmd(net, verdicts.as_deref()),
        Command::Run(a) => run_cmd(a),
        Command::Replay { net, check } => replay(net, *check),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
