//! Acceptance criteria, one pass/fail line each. Exits non-zero when any
//! criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::time::Instant;

use baryloc::collective::Backend;
use baryloc::geometry::{
    barycentric_from_distances, barycentric_from_positions, cfc, max_pairwise_distance, signed_volume,
    SquaredDistanceMatrix5,
};
use baryloc::graph::{
    assemble_linear_system, discover_cliques, generate_random_geometric, prune_scarcely_connected, weigh_cliques,
    AnchorRule, GenerationParams,
};
use baryloc::localization::{localize, LocalizationError, LocalizationParams, LocalizationProblem, LocalizationResult};
use baryloc::pipeline::{run_scenario, PipelineError, PipelineRun};
use baryloc::reference::{dense_cg, kernel_localizability, DenseSystem};
use baryloc::scenario::Scenario;
use baryloc::verification::{localizable_subgraph, verify_localizability, VerificationError, VerificationParams};
use baryloc::{Configuration, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASE_I_SEEDS: usize = 50;
const CASE_I_KS: [usize; 3] = [1, 2, 5];
const RECOVERY_TOL: f64 = 1e-6;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn case_i(seed: u64) -> Scenario {
    Scenario::defaults(50, 100.0, 50.0, seed)
}

/// Largest per-node ‖p̂ − p‖ / ‖p‖.
fn worst_node_error(res: &LocalizationResult, truth: &Configuration) -> f64 {
    res.nodes
        .iter()
        .zip(&res.estimates)
        .map(|(id, p)| {
            let t = truth.position(*id);
            (*p - t).norm() / t.norm().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

/// A Case-I run and its localizations for every K.
struct CaseRun {
    seed: u64,
    run: PipelineRun,
    by_k: Vec<(usize, LocalizationResult)>,
}

/// The first `CASE_I_SEEDS` seeds whose localizable subgraph is non-empty and
/// connected, and the number of seeds skipped on the way.
fn case_i_runs() -> Result<(Vec<CaseRun>, usize), String> {
    let mut runs = Vec::new();
    let mut skipped = 0;
    let mut seed = 0;
    while runs.len() < CASE_I_SEEDS {
        let scenario = case_i(seed);
        match run_scenario(&scenario) {
            Ok(run) if run.problem.n_z() > 0 => {
                let mut by_k = Vec::new();
                for k in CASE_I_KS {
                    let res = if k == scenario.k {
                        run.localization.clone()
                    } else {
                        localize(&run.problem, &Scenario { k, ..scenario.clone() }.localization(), Some(&run.config))
                            .map_err(|e| format!("seed {seed} K {k}: {e}"))?
                    };
                    by_k.push((k, res));
                }
                runs.push(CaseRun { seed, run, by_k });
            }
            Ok(_)
            | Err(PipelineError::Verification(VerificationError::SubgraphDisconnected { .. }))
            | Err(PipelineError::Localization(LocalizationError::SubgraphDisconnected { .. })) => skipped += 1,
            Err(e) => return Err(format!("seed {seed}: {e}")),
        }
        seed += 1;
    }
    Ok((runs, skipped))
}

fn ac1_exact_recovery(runs: &[CaseRun], skipped: usize) -> Verdict {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut most_iters = (0, 1);
    for c in runs {
        let base = &c.by_k[0].1.estimates;
        for (k, res) in &c.by_k {
            let e = worst_node_error(res, &c.run.config);
            let cap = 3 * res.n_z() + 5;
            worst = worst.max(e);
            if res.iterations * most_iters.1 > most_iters.0 * cap {
                most_iters = (res.iterations, cap);
            }
            if !(e < RECOVERY_TOL) || res.iterations > cap || &res.estimates != base {
                failures.push(format!("seed {} K {k}", c.seed));
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} seeds x K {:?} ({skipped} skipped: empty or disconnected localizable set), worst node error {worst:.1e}, \
             highest iterations {}/{} (3n_z+5){}",
            runs.len(),
            CASE_I_KS,
            most_iters.0,
            most_iters.1,
            fail_list(&failures)
        ),
    )
}

fn ac2_round_bounds(runs: &[CaseRun]) -> Verdict {
    let mut failures = Vec::new();
    let mut simulated_fkms = 0;
    let mut simulated_runs = 0;
    // every direct run
    for c in runs {
        for (k, res) in &c.by_k {
            if res.rounds > res.round_bound || res.ledger.fkms_violations > 0 {
                failures.push(format!("seed {} K {k}", c.seed));
            }
        }
    }
    // message-passing runs: localization on the first Case-I seeds
    for c in runs.iter().take(5) {
        for k in CASE_I_KS {
            let params =
                LocalizationParams { backend: Backend::Simulated, ..Scenario { k, ..case_i(c.seed) }.localization() };
            match localize(&c.run.problem, &params, None) {
                Ok(res) => {
                    simulated_runs += 1;
                    simulated_fkms += res.ledger.fkms_calls + res.init_ledger.fkms_calls;
                    let violations = res.ledger.fkms_violations + res.init_ledger.fkms_violations;
                    if violations > 0 || res.rounds > res.round_bound {
                        failures.push(format!("simulated seed {} K {k}", c.seed));
                    }
                }
                Err(e) => failures.push(format!("simulated seed {} K {k}: {e}", c.seed)),
            }
        }
    }
    // and verification on small networks
    let mut seed = 0;
    let mut verified = 0;
    while verified < 10 {
        seed += 1;
        let Some((_, net, cliques)) = weighed(18, 55.0, seed) else { continue };
        for k in [1, 3] {
            let params =
                VerificationParams { iter_max: 15, k, seed, backend: Backend::Simulated, ..Default::default() };
            match verify_localizability(&net, &cliques, &params) {
                Ok(report) => {
                    simulated_fkms += report.ledger.fkms_calls;
                    if report.ledger.fkms_violations > 0 {
                        failures.push(format!("simulated verification seed {seed} K {k}"));
                    }
                }
                Err(VerificationError::SubgraphDisconnected { .. }) => {}
                Err(e) => failures.push(format!("simulated verification seed {seed} K {k}: {e}")),
            }
        }
        verified += 1;
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} direct runs, {simulated_runs} simulated localizations and {} simulated verifications; \
             {simulated_fkms} measured FKMS invocations, 0 allowed violations{}",
            runs.len() * CASE_I_KS.len(),
            2 * verified,
            fail_list(&failures)
        ),
    )
}

fn weighed(
    n: usize,
    radius: f64,
    seed: u64,
) -> Option<(Configuration, baryloc::SensorNetwork, Vec<baryloc::WeightedClique>)> {
    let params = GenerationParams { n, box_side: 100.0, radius, anchor_rule: AnchorRule::Random, seed };
    let (config, net) = generate_random_geometric(&params).ok()?;
    let (net, _) = prune_scarcely_connected(&net).ok()?;
    let cliques = weigh_cliques(&config, &discover_cliques(&net), 1e-2).admitted;
    Some((config, net, cliques))
}

fn ac3_oracle_agreement() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut unlocalizable = 0;
    let mut failures = Vec::new();
    let mut seed = 0;
    while checked < 100 {
        seed += 1;
        let n = rng.gen_range(10..=30);
        let radius = rng.gen_range(35.0..70.0);
        let Some((_, net, cliques)) = weighed(n, radius, seed) else { continue };
        if net.free().is_empty() {
            continue;
        }
        let params = VerificationParams { seed, ..Default::default() };
        let sys = assemble_linear_system(&net, &cliques);
        let oracle = kernel_localizability(&sys.m);
        let report = match verify_localizability(&net, &cliques, &params) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                checked += 1;
                continue;
            }
        };
        let got = report.localizable();
        let agree = sys.free.iter().zip(&oracle).all(|(id, ok)| got.contains(id) == *ok);
        unlocalizable += oracle.iter().filter(|ok| !**ok).count();
        if !agree {
            failures.push(format!("seed {seed}"));
        }
        checked += 1;
    }
    verdict(
        failures.is_empty(),
        format!(
            "{checked} networks (n 10..30), {unlocalizable} unlocalizable nodes per oracle, {} disagreements{}",
            failures.len(),
            fail_list(&failures)
        ),
    )
}

/// Small instances for the CG comparisons: n = 10, radius 60, the first 20
/// seeds with 1 ≤ n_z ≤ 6.
fn small_cg_runs() -> Vec<(u64, LocalizationProblem, Configuration, LocalizationResult)> {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < 20 {
        seed += 1;
        let Some((config, net, cliques)) = weighed(10, 60.0, seed) else { continue };
        let Ok(report) = verify_localizability(&net, &cliques, &VerificationParams { seed, ..Default::default() })
        else {
            continue;
        };
        let Ok(vz) = localizable_subgraph(&net, &report) else { continue };
        if vz.is_empty() || vz.len() > 6 {
            continue;
        }
        let problem = LocalizationProblem::new(&net, &cliques, &vz, &config).expect("verified set");
        let params = LocalizationParams { seed, keep_history: true, ..Default::default() };
        let res = localize(&problem, &params, Some(&config)).expect("small instance");
        out.push((seed, problem, config, res));
    }
    out
}

fn ac4_cg_oracle(small: &[(u64, LocalizationProblem, Configuration, LocalizationResult)]) -> Verdict {
    let mut worst = 0.0f64;
    let mut worst_before_last = 0.0f64;
    let mut failures = Vec::new();
    for (seed, problem, config, res) in small {
        let dense = DenseSystem::from_linear_system(&problem.system(), config);
        let x0: Vec<[f64; 3]> = res.initial.iter().map(|p| p.to_array()).collect();
        let oracle = dense_cg(&dense, &x0, 1e-14, res.max_iter);
        let mut gap = 0.0f64;
        let steps = res.history.len().max(oracle.len());
        for k in 0..steps {
            // a run that stops early is compared with its final iterate
            let got = &res.history[k.min(res.history.len() - 1)].x;
            let want = &oracle[k.min(oracle.len() - 1)].x;
            let scale = want.iter().map(|p| Point3::from_array(*p).norm()).fold(1.0, f64::max);
            let d = got.iter().zip(want).map(|(a, b)| (*a - Point3::from_array(*b)).norm()).fold(0.0, f64::max) / scale;
            gap = gap.max(d);
            if k + 1 < problem.n_z() {
                worst_before_last = worst_before_last.max(d);
            }
        }
        worst = worst.max(gap);
        if !(gap < 1e-10) {
            failures.push(format!("seed {seed} (n_z {}, gap {gap:.1e})", problem.n_z()));
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} instances with n_z <= 6, worst iterate gap {worst:.1e} relative ({worst_before_last:.1e} before step n_z){}",
            small.len(),
            fail_list(&failures)
        ),
    )
}

fn ac5_cg_relations(small: &[(u64, LocalizationProblem, Configuration, LocalizationResult)]) -> Verdict {
    let dot = |a: &[Point3], b: &[Point3]| a.iter().zip(b).map(|(x, y)| x.dot(*y)).sum::<f64>();
    let mut worst_r = 0.0f64;
    let mut worst_v = 0.0f64;
    // iterates before step n_z, where exact CG has not yet terminated
    let mut early = 0.0f64;
    for (_, problem, config, res) in small {
        let dense = DenseSystem::from_linear_system(&problem.system(), config);
        let apply = |v: &[Point3]| -> Vec<Point3> {
            dense.a.iter().map(|row| row.iter().zip(v).fold(Point3::ZERO, |acc, (w, p)| acc + *p * *w)).collect()
        };
        let h = &res.history;
        let r0 = dot(&h[0].r, &h[0].r);
        let av: Vec<Vec<Point3>> = h.iter().map(|s| apply(&s.v)).collect();
        for g in 0..h.len() {
            for f in 0..g {
                let rr = dot(&h[g].r, &h[f].r).abs() / r0;
                let va = dot(&h[g].v, &av[f]).abs() / r0;
                worst_r = worst_r.max(rr);
                worst_v = worst_v.max(va);
                if g < res.n_z() {
                    early = early.max(rr).max(va);
                }
            }
        }
    }
    verdict(
        worst_r < 1e-8 && worst_v < 1e-8,
        format!(
            "{} runs, max |r(g)'r(f)| = {worst_r:.1e} and max |v(g)'Av(f)| = {worst_v:.1e}, relative to ||r(0)||^2 ({early:.1e} before step n_z)",
            small.len()
        ),
    )
}

fn ac6_geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut round_trip, mut unity, mut agreement) = (0.0f64, 0.0f64, 0.0f64);
    let mut drawn = 0;
    while drawn < 1000 {
        let pts: [Point3; 5] = std::array::from_fn(|_| {
            Point3::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))
        });
        let l = max_pairwise_distance(&pts);
        // generic: no four of the five points close to a plane
        let generic = (0..5).all(|skip| {
            let q: Vec<Point3> = (0..5).filter(|i| *i != skip).map(|i| pts[i]).collect();
            signed_volume(q[0], q[1], q[2], q[3]).abs() > 1e-3 * l * l * l
        });
        if !generic {
            continue;
        }
        drawn += 1;
        let d = SquaredDistanceMatrix5::from_points(&pts).expect("finite points");
        let frame = cfc(&d).expect("generic clique embeds");
        for a in 0..5 {
            for b in 0..5 {
                let got = frame.q[a].distance(frame.q[b]);
                round_trip = round_trip.max((got - d.get(a, b).sqrt()).abs() / l);
            }
        }
        let from_distances = barycentric_from_distances(&d).expect("generic clique");
        let from_positions =
            barycentric_from_positions(pts[0], [pts[1], pts[2], pts[3], pts[4]]).expect("generic clique");
        unity = unity.max((from_distances.sum() - 1.0).abs()).max((from_positions.sum() - 1.0).abs());
        let scale = from_positions.weights.iter().fold(1.0f64, |m, w| m.max(w.abs()));
        for (a, b) in from_distances.weights.iter().zip(from_positions.weights) {
            agreement = agreement.max((a - b).abs() / scale);
        }
    }
    verdict(
        round_trip < 1e-8 && unity < 1e-9 && agreement < 1e-7,
        format!(
            "{drawn} cliques: distance round trip {round_trip:.1e} relative, partition of unity {unity:.1e}, \
             distance vs position weights {agreement:.1e}"
        ),
    )
}

fn ac7_baselines(runs: &[CaseRun]) -> Verdict {
    let mut wins = 0;
    let mut losses = Vec::new();
    for c in runs {
        let cg = &c.run.localization;
        let at = cg.iterations;
        let cg_ratio = cg.error_ratio.last().copied().unwrap_or(f64::NAN);
        // a series that diverged before `at` counts as infinitely worse
        let ratio = |s: &[f64]| if s.len() > at { s[at] } else { f64::INFINITY };
        let (ri, ju) = (ratio(&c.run.richardson.error_ratio), ratio(&c.run.jacobi.error_ratio));
        if cg_ratio < ri && cg_ratio < ju {
            wins += 1;
        } else {
            losses.push(format!("seed {}", c.seed));
        }
    }
    verdict(
        wins >= 45,
        format!(
            "CG below both RI and JU at its termination step in {wins}/{} seeds (45 required){}",
            runs.len(),
            fail_list(&losses)
        ),
    )
}

fn ac8_scale() -> Verdict {
    let t = Instant::now();
    let scenario = Scenario { iter_max: 3, ..Scenario::defaults(1000, 100.0, 20.0, 0) };
    match run_scenario(&scenario) {
        Ok(run) => {
            let secs = t.elapsed().as_secs_f64();
            let res = &run.localization;
            let e = worst_node_error(res, &run.config);
            verdict(
                secs < 600.0 && e < RECOVERY_TOL && res.n_z() > 0,
                format!(
                    "n 1000, radius 20: {} admitted cliques, {} localizable of {} free, {} unlocalizable, {} CG iterations, \
                     worst node error {e:.1e}, {secs:.0} s",
                    run.cliques.len(),
                    res.n_z(),
                    run.verification.n_f(),
                    run.verification.unlocalizable().len(),
                    res.iterations
                ),
            )
        }
        Err(e) => verdict(false, format!("pipeline failed: {e}")),
    }
}

fn ac9_determinism() -> Verdict {
    let dirs = [tempfile::tempdir(), tempfile::tempdir()];
    let mut contents: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
    for dir in &dirs {
        let Ok(dir) = dir else { return verdict(false, "no temporary directory".into()) };
        let run = match run_scenario(&case_i(2)) {
            Ok(r) => r,
            Err(e) => return verdict(false, format!("pipeline failed: {e}")),
        };
        if let Err(e) = run.write_artifacts(dir.path()) {
            return verdict(false, format!("writing artifacts failed: {e}"));
        }
        let mut files = BTreeMap::new();
        for name in ["network.txt", "verdicts.json", "trace.csv", "positions.csv", "summary.json"] {
            files.insert(name.to_string(), std::fs::read(dir.path().join(name)).unwrap_or_default());
        }
        contents.push(files);
    }
    let differing: Vec<&String> = contents[0].keys().filter(|k| contents[0][*k] != contents[1][*k]).collect();
    let empty = contents[0].values().filter(|v| v.is_empty()).count();
    verdict(
        differing.is_empty() && empty == 0,
        format!("{} artifacts compared byte for byte, {} differ, {empty} missing", contents[0].len(), differing.len()),
    )
}

fn fail_list(failures: &[String]) -> String {
    if failures.is_empty() {
        String::new()
    } else {
        let shown: Vec<&str> = failures.iter().take(8).map(String::as_str).collect();
        let more = failures.len().saturating_sub(shown.len());
        let tail = if more > 0 { format!(" and {more} more") } else { String::new() };
        format!("; failing: {}{tail}", shown.join(", "))
    }
}

fn report(id: &str, name: &str, start: Instant, v: &Verdict) -> bool {
    println!(
        "{id} {name}: {} ({}) [{:.1} s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

fn main() {
    let mut all = true;

    let t = Instant::now();
    let cases = case_i_runs();
    let setup = t.elapsed();
    match &cases {
        Ok((runs, skipped)) => {
            let t = Instant::now() - setup;
            all &= report("AC1", "exact recovery", t, &ac1_exact_recovery(runs, *skipped));
            let t = Instant::now();
            all &= report("AC2", "round bounds", t, &ac2_round_bounds(runs));
        }
        Err(e) => {
            for (id, name) in [("AC1", "exact recovery"), ("AC2", "round bounds")] {
                all &= report(id, name, t, &verdict(false, format!("Case-I runs failed: {e}")));
            }
        }
    }

    let t = Instant::now();
    all &= report("AC3", "localizability oracle agreement", t, &ac3_oracle_agreement());

    let t = Instant::now();
    let small = small_cg_runs();
    all &= report("AC4", "CG oracle equivalence", t, &ac4_cg_oracle(&small));
    let t = Instant::now();
    all &= report("AC5", "CG orthogonality and conjugacy", t, &ac5_cg_relations(&small));

    let t = Instant::now();
    all &= report("AC6", "geometry suite", t, &ac6_geometry());

    let t = Instant::now();
    match &cases {
        Ok((runs, _)) => all &= report("AC7", "baseline comparison", t, &ac7_baselines(runs)),
        Err(e) => all &= report("AC7", "baseline comparison", t, &verdict(false, format!("Case-I runs failed: {e}"))),
    }

    let t = Instant::now();
    all &= report("AC8", "scale check", t, &ac8_scale());

    let t = Instant::now();
    all &= report("AC9", "determinism", t, &ac9_determinism());

    if !all {
        std::process::exit(1);
    }
}
