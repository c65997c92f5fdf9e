//! Command-line interface exposing the verification and simulation
//! workflows: energy barriers, model constants, ladder solves, canonical
//! paths, landscape exploration, saddle-plateau graphs, exact identity and
//! capacity checks, tiny-lattice exact solves, and kinetic Monte Carlo.
//!
//! Structured JSON goes to standard output (every payload embeds a manifest
//! with the resolved parameters and a result digest); a human-readable
//! summary goes to standard error. Exit codes: 0 when all assertions pass,
//! 2 when an assertion fails (the report is still emitted), 1 on usage or
//! resource errors.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use bcmeta::canonical::{canonical_path, gamma_barrier, PathChoices};
use bcmeta::edge::{build_edge_graph, edge_typical, gateway_sets, ladder_map};
use bcmeta::explore::{cutoff_component, verify_barrier, ExploreError, ExploreLimits};
use bcmeta::kmc::{
    estimate_stats, sequence_stats, simulate_hitting, KmcError, SimulationConfig, TargetSet,
    TimeConvention,
};
use bcmeta::ladder::{
    build_aux, c_constant, dirichlet_energy_hat, dirichlet_energy_projected, model_constants,
    project_aux, solve_potential_linear, solve_projected_potential,
};
use bcmeta::lattice::{
    build_lattice, format_config, ground_states, hamiltonian, parse_config, Boundary, Lattice,
    SpinConfig,
};
use bcmeta::potential::TinyExact;
use bcmeta::testfn::{verify_capacity_asymptotics, verify_identities, TestFnError};

#[derive(Parser)]
#[command(name = "bcmeta", version, about = "Blume-Capel metastability toolkit")]
struct Cli {
    /// JSON file supplying any flag as a default; command line wins.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Also write the output here (.csv for simulate sweeps, JSON otherwise).
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Worker threads for replica parallelism; 1 gives identical results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BoundaryArg {
    Open,
    Periodic,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConventionArg {
    Continuous,
    DiscreteScaled,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Lattice width.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Lattice height.
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long)]
    boundary: Option<BoundaryArg>,
    /// Comma-separated inverse temperatures.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Exploration budget (number of configurations).
    #[arg(long)]
    max_states: Option<usize>,
    /// Per-replica jump cap.
    #[arg(long)]
    max_jumps: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify the energy barrier between the three ground states.
    Barrier(Common),
    /// Print the model constants (ladder constant, bulk, edge, kappa).
    Constants(Common),
    /// Solve the ladder potential and compare every route to the closed form.
    AuxSolve(Common),
    /// Emit a canonical interface path and its energy profile.
    CanonicalPath {
        #[command(flatten)]
        common: Common,
        /// Transition pair, e.g. "-1,0" or "0,+1".
        #[arg(long)]
        pair: Option<String>,
    },
    /// Explore the landscape reachable from the ground states under a cutoff.
    Explore {
        #[command(flatten)]
        common: Common,
        /// Energy cutoff (defaults to the barrier).
        #[arg(long)]
        cutoff: Option<i64>,
    },
    /// Summarize a saddle-plateau graph and its ladder projection.
    EdgeGraph {
        #[command(flatten)]
        common: Common,
        /// Which ground state's edge region to build (-1, 0, or +1).
        #[arg(long)]
        a: Option<i8>,
    },
    /// Run the exact divergence/norm identity checks for the test objects.
    Verify(Common),
    /// Sweep capacity ratios against their limiting values over beta.
    Capacity(Common),
    /// Exact potential theory on a tiny lattice (full state space).
    Exact(Common),
    /// Sample hitting times with the rejection-free simulator.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Start: "-1", "0", "+1", or a row-major configuration string.
        #[arg(long)]
        start: Option<String>,
        /// Comma-separated absorbing sets: "-1","0","+1" or "N-1","N0","N+1".
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        #[arg(long)]
        time_convention: Option<ConventionArg>,
        /// Include every per-replica sample in the JSON output.
        #[arg(long)]
        samples: bool,
    },
}

/// Optional defaults loaded from --config; the command line overrides.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileDefaults {
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(rename = "L")]
    l: Option<usize>,
    boundary: Option<String>,
    beta: Option<Vec<f64>>,
    seed: Option<u64>,
    replicas: Option<usize>,
    max_states: Option<usize>,
    max_jumps: Option<u64>,
    threads: Option<usize>,
    pair: Option<String>,
    a: Option<i8>,
    cutoff: Option<i64>,
    start: Option<String>,
    targets: Option<Vec<String>>,
    time_convention: Option<String>,
}

enum CmdError {
    Usage(String),
    Assertion { message: String, detail: Value },
}

impl CmdError {
    fn usage(e: impl std::fmt::Display) -> CmdError {
        CmdError::Usage(e.to_string())
    }
    fn assertion(e: impl std::fmt::Display) -> CmdError {
        CmdError::Assertion { message: e.to_string(), detail: Value::Null }
    }
}

struct Output {
    result: Value,
    summary: String,
    pass: bool,
    seeds: Vec<u64>,
    /// CSV rendering for sweep outputs, when one exists.
    csv: Option<String>,
}

impl Output {
    fn new(result: Value, summary: impl Into<String>, pass: bool) -> Output {
        Output { result, summary: summary.into(), pass, seeds: vec![], csv: None }
    }
}

/// Identity and structural violations are assertion failures (exit 2);
/// everything else is a usage or resource problem (exit 1).
fn classify_testfn(e: TestFnError) -> CmdError {
    use TestFnError::*;
    match &e {
        IdentityViolation { .. }
        | InvariantViolation { .. }
        | NonDecaying { .. }
        | Conditioning { .. }
        | OverlapMismatch { .. }
        | Uncovered { .. }
        | PieceEscapes { .. }
        | AsymmetricTypicalSet
        | SupportOffLevel => CmdError::assertion(e),
        _ => CmdError::usage(e),
    }
}

fn classify_explore(e: ExploreError) -> CmdError {
    match &e {
        ExploreError::BarrierMismatch(..) => CmdError::assertion(e),
        _ => CmdError::usage(e),
    }
}

struct Resolved {
    k: usize,
    l: usize,
    boundary: Boundary,
    betas: Vec<f64>,
    seed: u64,
    replicas: usize,
    limits: ExploreLimits,
    max_jumps: Option<u64>,
}

fn resolve(c: &Common, f: &FileDefaults) -> Result<Resolved, CmdError> {
    let k = c
        .k
        .or(f.k)
        .ok_or_else(|| CmdError::Usage("missing required --K".to_string()))?;
    let l = c
        .l
        .or(f.l)
        .ok_or_else(|| CmdError::Usage("missing required --L".to_string()))?;
    let boundary = match c.boundary {
        Some(BoundaryArg::Open) => Boundary::Open,
        Some(BoundaryArg::Periodic) => Boundary::Periodic,
        None => match f.boundary.as_deref() {
            Some("open") | None => Boundary::Open,
            Some("periodic") => Boundary::Periodic,
            Some(other) => {
                return Err(CmdError::Usage(format!("unknown boundary {other:?}")))
            }
        },
    };
    let mut limits = ExploreLimits::default();
    if let Some(ms) = c.max_states.or(f.max_states) {
        limits.max_states = ms;
    }
    Ok(Resolved {
        k,
        l,
        boundary,
        betas: c.beta.clone().or_else(|| f.beta.clone()).unwrap_or_default(),
        seed: c.seed.or(f.seed).unwrap_or(0),
        replicas: c.replicas.or(f.replicas).unwrap_or(1000),
        limits,
        max_jumps: c.max_jumps.or(f.max_jumps),
    })
}

fn lattice_of(r: &Resolved) -> Result<Lattice, CmdError> {
    build_lattice(r.k, r.l, r.boundary).map_err(CmdError::usage)
}

fn boundary_name(b: Boundary) -> &'static str {
    match b {
        Boundary::Open => "open",
        Boundary::Periodic => "periodic",
    }
}

fn base_params(r: &Resolved) -> Value {
    json!({
        "K": r.k,
        "L": r.l,
        "boundary": boundary_name(r.boundary),
    })
}

fn merge(mut params: Value, extra: Value) -> Value {
    if let (Some(map), Some(add)) = (params.as_object_mut(), extra.as_object()) {
        for (k, v) in add {
            map.insert(k.clone(), v.clone());
        }
    }
    params
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_barrier(r: &Resolved) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let allow_small = !lat.paper_regime;
    let report = verify_barrier(&lat, &r.limits, allow_small).map_err(classify_explore)?;
    let pass = report.pairs.iter().all(|p| {
        p.lower_confirmed && report.formula.map_or(true, |g| p.barrier == g)
    });
    let gamma = report.formula.unwrap_or_else(|| report.pairs[0].barrier);
    let result = json!({
        "gamma": gamma,
        "formula_applicable": report.formula.is_some(),
        "pairs": report.pairs,
        "all_pass": pass,
    });
    let summary = format!(
        "barrier {}x{} {}: gamma = {gamma}, {} pairs, {}",
        r.k,
        r.l,
        boundary_name(r.boundary),
        report.pairs.len(),
        if pass { "all confirmed" } else { "MISMATCH" }
    );
    Ok(Output::new(result, summary, pass))
}

fn cmd_constants(r: &Resolved) -> Result<Output, CmdError> {
    let mc = model_constants(r.k, r.l).map_err(CmdError::usage)?;
    let sites = (r.k * r.l) as f64;
    let result = json!({
        "K": r.k,
        "L": r.l,
        "c_k": mc.c_k,
        "bulk": mc.bulk,
        "edge": mc.edge,
        "kappa": mc.kappa,
        "kappa_over_sites": mc.kappa / sites,
        "gamma_open": mc.gamma(Boundary::Open),
        "gamma_periodic": mc.gamma(Boundary::Periodic),
    });
    let summary = format!(
        "constants {}x{}: c_K={:.10}, b={}, e={:.10}, kappa={:.10}",
        r.k, r.l, mc.c_k, mc.bulk, mc.edge, mc.kappa
    );
    Ok(Output::new(result, summary, true))
}

fn cmd_aux_solve(r: &Common, f: &FileDefaults) -> Result<Output, CmdError> {
    let k = r
        .k
        .or(f.k)
        .ok_or_else(|| CmdError::Usage("missing required --K".to_string()))?;
    let closed = c_constant(k).map_err(CmdError::usage)?;
    let g = build_aux(k).map_err(CmdError::usage)?;
    let h = solve_potential_linear(&g).map_err(CmdError::usage)?;
    let flux = h[g.origin as usize]
        - h[g.vertex(1, 0).expect("ladder origin neighbor exists") as usize];
    let energy_hat = dirichlet_energy_hat(&g, &h);
    let p = project_aux(&g);
    let hp = solve_projected_potential(&p).map_err(CmdError::usage)?;
    let energy_projected = dirichlet_energy_projected(&p, &hp);
    let max_diff = [flux, energy_hat, energy_projected]
        .iter()
        .map(|v| (v - closed).abs())
        .fold(0.0, f64::max);
    let pass = max_diff <= 1e-10;
    let result = json!({
        "K": k,
        "c_closed_form": closed,
        "c_origin_flux": flux,
        "c_dirichlet_full": energy_hat,
        "c_dirichlet_projected": energy_projected,
        "max_abs_diff": max_diff,
        "n_verts_full": g.n_verts(),
        "n_verts_projected": p.n_verts(),
        "tolerance": 1e-10,
        "pass": pass,
    });
    let summary = format!(
        "aux-solve K={k}: c_K = {closed:.10}, max route disagreement {max_diff:.2e}"
    );
    Ok(Output::new(result, summary, pass))
}

fn parse_pair(text: &str) -> Result<(i8, i8), CmdError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(CmdError::Usage(format!("pair must be \"a,b\", got {text:?}")));
    }
    let a = parts[0].trim().parse::<i8>().map_err(CmdError::usage)?;
    let b = parts[1].trim().parse::<i8>().map_err(CmdError::usage)?;
    Ok((a, b))
}

fn cmd_canonical_path(r: &Resolved, pair: (i8, i8)) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let path = canonical_path(&lat, pair.0, pair.1, &PathChoices::bottom_left(r.l))
        .map_err(CmdError::usage)?;
    let energies: Vec<i64> = path.iter().map(|c| hamiltonian(&lat, c)).collect();
    let max_energy = *energies.iter().max().expect("path is non-empty");
    let gamma = gamma_barrier(&lat);
    let pass = max_energy == gamma;
    let result = json!({
        "pair": [pair.0, pair.1],
        "length": path.len(),
        "gamma": gamma,
        "max_energy": max_energy,
        "energies": energies,
        "configs": path.iter().map(|c| format_config(&lat, c)).collect::<Vec<_>>(),
        "pass": pass,
    });
    let summary = format!(
        "canonical-path {}x{} ({},{}): {} steps, peak {} vs gamma {}",
        r.k, r.l, pair.0, pair.1, path.len() - 1, max_energy, gamma
    );
    Ok(Output::new(result, summary, pass))
}

fn cmd_explore(r: &Resolved, cutoff: Option<i64>) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let cutoff = cutoff.unwrap_or_else(|| gamma_barrier(&lat));
    let seeds = ground_states(&lat);
    let graph = cutoff_component(&lat, &seeds, cutoff, &[], &r.limits).map_err(classify_explore)?;
    let levels: Vec<Value> =
        graph.level_counts().iter().map(|(e, n)| json!({"energy": e, "count": n})).collect();
    let result = json!({
        "cutoff": cutoff,
        "n_verts": graph.n_verts(),
        "n_edges": graph.n_edges(),
        "truncated": graph.truncated,
        "level_counts": levels,
    });
    let summary = format!(
        "explore {}x{} {} cutoff {}: {} states, {} edges{}",
        r.k,
        r.l,
        boundary_name(r.boundary),
        cutoff,
        graph.n_verts(),
        graph.n_edges(),
        if graph.truncated { " (TRUNCATED)" } else { "" }
    );
    Ok(Output::new(result, summary, !graph.truncated))
}

fn cmd_edge_graph(r: &Resolved, a: i8) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let eg = build_edge_graph(&lat, a, &r.limits).map_err(CmdError::usage)?;
    let good: Vec<(i8, i8)> = match a {
        -1 => vec![(-1, 0)],
        0 => vec![(0, -1), (0, 1)],
        1 => vec![(1, 0)],
        _ => return Err(CmdError::Usage(format!("bad spin {a}"))),
    };
    let mut pair_reports = Vec::new();
    for pair in good {
        let gs = gateway_sets(&lat, pair, &r.limits).map_err(CmdError::usage)?;
        let lm = ladder_map(&lat, pair, &eg, &gs).map_err(CmdError::usage)?;
        let families: Vec<Value> = lm
            .families
            .iter()
            .map(|fam| {
                json!({
                    "side": format!("{:?}", fam.side),
                    "corner": format!("{:?}", fam.corner),
                    "transposed": fam.transposed,
                })
            })
            .collect();
        pair_reports.push(json!({
            "pair": [pair.0, pair.1],
            "multiplicity": lm.families.len(),
            "families": families,
            "ladder_verts": lm.aux.n_verts(),
        }));
    }
    let n_plateau = eg.typical.plateau().len();
    let well_sizes: Vec<usize> = eg.typical.nbhd.iter().map(|w| w.len()).collect();
    let result = json!({
        "a": a,
        "gamma": eg.typical.gamma,
        "n_verts": eg.n_verts(),
        "n_plateau": n_plateau,
        "n_representatives": eg.typical.reps.len(),
        "well_sizes": well_sizes,
        "pairs": pair_reports,
    });
    let summary = format!(
        "edge-graph {}x{} a={}: {} plateau states, {} wells",
        r.k,
        r.l,
        a,
        n_plateau,
        well_sizes.len()
    );
    Ok(Output::new(result, summary, true))
}

fn cmd_verify(r: &Resolved) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let betas = if r.betas.is_empty() { vec![6.0, 8.0, 10.0] } else { r.betas.clone() };
    let mut reports = Vec::new();
    let mut total = 0usize;
    for &beta in &betas {
        let rep = verify_identities(&lat, beta).map_err(classify_testfn)?;
        total += rep.checks.len();
        reports.push(rep);
    }
    let result = json!({
        "betas": betas,
        "tolerance": bcmeta::testfn::IDENTITY_TOL,
        "reports": reports,
    });
    let summary = format!(
        "verify {}x{}: {} identity checks passed across beta in {:?}",
        r.k, r.l, total, betas
    );
    Ok(Output::new(result, summary, true))
}

fn cmd_capacity(r: &Resolved) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let betas = if r.betas.is_empty() { vec![6.0, 8.0] } else { r.betas.clone() };
    let report = verify_capacity_asymptotics(&lat, &betas).map_err(classify_testfn)?;
    let worst_final = report
        .parts
        .iter()
        .map(|p| p.per_beta.last().expect("sweep is non-empty").deviation)
        .fold(0.0, f64::max);
    let summary = format!(
        "capacity {}x{}: 4 parts over beta {:?}, final relative deviation <= {:.3e}",
        r.k, r.l, betas, worst_final
    );
    let result = serde_json::to_value(&report).expect("report serializes");
    Ok(Output::new(result, summary, true))
}

fn cmd_exact(r: &Resolved) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let betas = if r.betas.is_empty() { vec![1.0, 2.0] } else { r.betas.clone() };
    let [minus, zero, plus] = ground_states(&lat);
    let mut blocks = Vec::new();
    let mut pass = true;
    for &beta in &betas {
        let te = TinyExact::new(&lat, beta).map_err(CmdError::usage)?;
        let t_m0 = te.mean_hitting_time(&minus, &[zero]).map_err(CmdError::usage)?;
        let t_0m = te.mean_hitting_time(&zero, &[minus]).map_err(CmdError::usage)?;
        let t_mp = te.mean_hitting_time(&minus, &[plus]).map_err(CmdError::usage)?;
        let t_m_both =
            te.mean_hitting_time(&minus, &[zero, plus]).map_err(CmdError::usage)?;
        let h_mp = te.equilibrium_potential(&[minus], &[plus]).map_err(CmdError::usage)?;
        let h_zero_mid = h_mp[te.index_of(&zero)];
        let h_0p = te.equilibrium_potential(&[zero], &[plus]).map_err(CmdError::usage)?;
        let split_from_minus = h_0p[te.index_of(&minus)];
        let cap_m0 = te.capacity(&[minus], &[zero]).map_err(CmdError::usage)?;
        let cap_m_both = te.capacity(&[minus], &[zero, plus]).map_err(CmdError::usage)?;
        let mid_ok = (h_zero_mid - 0.5).abs() <= 1e-10;
        pass &= mid_ok;
        blocks.push(json!({
            "beta": beta,
            "z_beta": te.z_beta,
            "mean_time_minus_to_zero": t_m0,
            "mean_time_zero_to_minus": t_0m,
            "mean_time_minus_to_plus": t_mp,
            "mean_time_minus_to_zero_or_plus": t_m_both,
            "h_minus_plus_at_zero": h_zero_mid,
            "h_minus_plus_at_zero_is_half": mid_ok,
            "p_zero_before_plus_from_minus": split_from_minus,
            "cap_minus_zero": cap_m0,
            "cap_minus_to_zero_or_plus": cap_m_both,
        }));
    }
    let result = json!({"betas": betas, "per_beta": blocks});
    let summary = format!(
        "exact {}x{} {}: solved {} beta value(s); h(-1,+1) at 0 {} 1/2",
        r.k,
        r.l,
        boundary_name(r.boundary),
        betas.len(),
        if pass { "equals" } else { "DIFFERS FROM" }
    );
    Ok(Output::new(result, summary, pass))
}

/// Interprets a target token: a ground-state name or an "N<state>" well.
fn parse_target(
    lat: &Lattice,
    limits: &ExploreLimits,
    token: &str,
) -> Result<TargetSet, CmdError> {
    let [minus, zero, plus] = ground_states(lat);
    let mono = |name: &str| match name {
        "-1" => Some(minus),
        "0" => Some(zero),
        "+1" | "1" => Some(plus),
        _ => None,
    };
    if let Some(cfg) = mono(token) {
        return Ok(TargetSet::new(token, vec![cfg]));
    }
    if let Some(rest) = token.strip_prefix('N') {
        let a: i8 = match rest {
            "-1" => -1,
            "0" => 0,
            "+1" | "1" => 1,
            _ => return Err(CmdError::Usage(format!("unknown target {token:?}"))),
        };
        let et = edge_typical(lat, a, limits).map_err(CmdError::usage)?;
        return Ok(TargetSet::new(token, et.nbhd[0].clone()));
    }
    Err(CmdError::Usage(format!(
        "unknown target {token:?}; use -1, 0, +1 or N-1, N0, N+1"
    )))
}

fn parse_start(lat: &Lattice, token: &str) -> Result<SpinConfig, CmdError> {
    let [minus, zero, plus] = ground_states(lat);
    match token {
        "-1" => Ok(minus),
        "0" => Ok(zero),
        "+1" | "1" => Ok(plus),
        text => parse_config(lat, text).map_err(CmdError::usage),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    r: &Resolved,
    start_token: &str,
    target_tokens: &[String],
    convention: TimeConvention,
    include_samples: bool,
) -> Result<Output, CmdError> {
    let lat = lattice_of(r)?;
    let betas = if r.betas.is_empty() { vec![1.0] } else { r.betas.clone() };
    let start = parse_start(&lat, start_token)?;
    let targets: Vec<TargetSet> = target_tokens
        .iter()
        .map(|t| parse_target(&lat, &r.limits, t))
        .collect::<Result<_, _>>()?;
    let scale_consts = model_constants(r.k, r.l).ok();

    let mut per_beta = Vec::new();
    let mut csv = String::from(
        "beta,replicas,n_used,n_flagged,mean,stderr,ks_stat,ks_p,scaled_mean,scaled_lo,scaled_hi\n",
    );
    for &beta in &betas {
        let mut cfg = SimulationConfig::new(
            lat.clone(),
            beta,
            start,
            targets.clone(),
            r.replicas,
            r.seed,
        );
        cfg.time_convention = convention;
        if let Some(mj) = r.max_jumps {
            cfg.max_jumps = mj;
        }
        let samples = simulate_hitting(&cfg).map_err(CmdError::usage)?;
        let stats = match estimate_stats(&samples) {
            Ok(s) => s,
            Err(KmcError::Insufficient { have, need }) => {
                return Err(CmdError::Usage(format!(
                    "only {have} unflagged samples at beta {beta}, need {need}; raise --replicas or --max-jumps"
                )))
            }
            Err(e) => return Err(CmdError::usage(e)),
        };
        let seq = sequence_stats(&samples);
        // Eyring-Kramers scale kappa * e^(beta*Gamma), when defined.
        let scaled = scale_consts.as_ref().map(|mc| {
            let scale = mc.kappa * (beta * mc.gamma(r.boundary) as f64).exp();
            json!({
                "scale": scale,
                "mean_over_scale": stats.mean / scale,
                "ci95_lo": (stats.mean - 1.96 * stats.stderr) / scale,
                "ci95_hi": (stats.mean + 1.96 * stats.stderr) / scale,
            })
        });
        let (sm, slo, shi) = scaled
            .as_ref()
            .map(|s| {
                (
                    s["mean_over_scale"].as_f64().unwrap_or(f64::NAN),
                    s["ci95_lo"].as_f64().unwrap_or(f64::NAN),
                    s["ci95_hi"].as_f64().unwrap_or(f64::NAN),
                )
            })
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        csv.push_str(&format!(
            "{beta},{},{},{},{},{},{},{},{sm},{slo},{shi}\n",
            r.replicas, stats.n_used, stats.n_flagged, stats.mean, stats.stderr,
            stats.ks_stat, stats.ks_p,
        ));
        let mut block = json!({
            "beta": beta,
            "stats": stats,
            "sequence": seq,
            "eyring_kramers": scaled,
        });
        if include_samples {
            block["samples"] = serde_json::to_value(&samples).expect("samples serialize");
        }
        per_beta.push(block);
    }
    let result = json!({
        "start": start_token,
        "targets": target_tokens,
        "replicas": r.replicas,
        "seed": r.seed,
        "time_convention": format!("{convention:?}"),
        "per_beta": per_beta,
    });
    let summary = format!(
        "simulate {}x{} start {} targets {:?}: {} replicas per beta {:?}",
        r.k, r.l, start_token, target_tokens, r.replicas, betas
    );
    let mut out = Output::new(result, summary, true);
    out.seeds = vec![r.seed];
    out.csv = Some(csv);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dispatch and output plumbing

fn run(cli: &Cli, defaults: &FileDefaults) -> (String, Value, Result<Output, CmdError>) {
    match &cli.cmd {
        Cmd::Barrier(c) => {
            let r = match resolve(c, defaults) {
                Ok(r) => r,
                Err(e) => return ("barrier".into(), Value::Null, Err(e)),
            };
            ("barrier".into(), base_params(&r), cmd_barrier(&r))
        }
        Cmd::Constants(c) => {
            let r = match resolve(c, defaults) {
                Ok(r) => r,
                Err(e) => return ("constants".into(), Value::Null, Err(e)),
            };
            ("constants".into(), base_params(&r), cmd_constants(&r))
        }
        Cmd::AuxSolve(c) => {
            let params = json!({"K": c.k.or(defaults.k)});
            ("aux-solve".into(), params, cmd_aux_solve(c, defaults))
        }
        Cmd::CanonicalPath { common, pair } => {
            let r = match resolve(common, defaults) {
                Ok(r) => r,
                Err(e) => return ("canonical-path".into(), Value::Null, Err(e)),
            };
            let pair_text = pair
                .clone()
                .or_else(|| defaults.pair.clone())
                .unwrap_or_else(|| "-1,0".to_string());
            let parsed = match parse_pair(&pair_text) {
                Ok(p) => p,
                Err(e) => return ("canonical-path".into(), Value::Null, Err(e)),
            };
            let params = merge(base_params(&r), json!({"pair": pair_text}));
            ("canonical-path".into(), params, cmd_canonical_path(&r, parsed))
        }
        Cmd::Explore { common, cutoff } => {
            let r = match resolve(common, defaults) {
                Ok(r) => r,
                Err(e) => return ("explore".into(), Value::Null, Err(e)),
            };
            let cut = cutoff.or(defaults.cutoff);
            let params = merge(
                base_params(&r),
                json!({"cutoff": cut, "max_states": r.limits.max_states}),
            );
            ("explore".into(), params, cmd_explore(&r, cut))
        }
        Cmd::EdgeGraph { common, a } => {
            let r = match resolve(common, defaults) {
                Ok(r) => r,
                Err(e) => return ("edge-graph".into(), Value::Null, Err(e)),
            };
            let a = a.or(defaults.a).unwrap_or(-1);
            let params = merge(base_params(&r), json!({"a": a}));
            ("edge-graph".into(), params, cmd_edge_graph(&r, a))
        }
        Cmd::Verify(c) => {
            let r = match resolve(c, defaults) {
                Ok(r) => r,
                Err(e) => return ("verify".into(), Value::Null, Err(e)),
            };
            let params = merge(base_params(&r), json!({"beta": r.betas}));
            ("verify".into(), params, cmd_verify(&r))
        }
        Cmd::Capacity(c) => {
            let r = match resolve(c, defaults) {
                Ok(r) => r,
                Err(e) => return ("capacity".into(), Value::Null, Err(e)),
            };
            let params = merge(base_params(&r), json!({"beta": r.betas}));
            ("capacity".into(), params, cmd_capacity(&r))
        }
        Cmd::Exact(c) => {
            let r = match resolve(c, defaults) {
                Ok(r) => r,
                Err(e) => return ("exact".into(), Value::Null, Err(e)),
            };
            let params = merge(base_params(&r), json!({"beta": r.betas}));
            ("exact".into(), params, cmd_exact(&r))
        }
        Cmd::Simulate { common, start, targets, time_convention, samples } => {
            let r = match resolve(common, defaults) {
                Ok(r) => r,
                Err(e) => return ("simulate".into(), Value::Null, Err(e)),
            };
            let start_token = start
                .clone()
                .or_else(|| defaults.start.clone())
                .unwrap_or_else(|| "-1".to_string());
            let target_tokens = targets
                .clone()
                .or_else(|| defaults.targets.clone())
                .unwrap_or_else(|| vec!["0".to_string(), "+1".to_string()]);
            let convention = match time_convention {
                Some(ConventionArg::Continuous) => TimeConvention::Continuous,
                Some(ConventionArg::DiscreteScaled) => TimeConvention::DiscreteScaled,
                None => match defaults.time_convention.as_deref() {
                    Some("discrete-scaled") | Some("DiscreteScaled") => {
                        TimeConvention::DiscreteScaled
                    }
                    _ => TimeConvention::Continuous,
                },
            };
            let params = merge(
                base_params(&r),
                json!({
                    "beta": r.betas,
                    "seed": r.seed,
                    "replicas": r.replicas,
                    "start": start_token,
                    "targets": target_tokens,
                    "time_convention": format!("{convention:?}"),
                    "max_jumps": r.max_jumps,
                }),
            );
            (
                "simulate".into(),
                params,
                cmd_simulate(&r, &start_token, &target_tokens, convention, *samples),
            )
        }
    }
}

fn emit(command: &str, params: Value, out: &Output, wall_ms: u64, dest: &Option<PathBuf>) -> i32 {
    let result_text = serde_json::to_string(&out.result).expect("result serializes");
    let digest = format!("{:x}", Sha256::digest(result_text.as_bytes()));
    let envelope = json!({
        "manifest": {
            "command": command,
            "params": params,
            "version": env!("CARGO_PKG_VERSION"),
            "seeds": out.seeds,
            "wall_clock_ms": wall_ms,
            "result_sha256": digest,
        },
        "result": out.result,
    });
    let text = serde_json::to_string_pretty(&envelope).expect("envelope serializes");
    println!("{text}");
    eprintln!("{}", out.summary);
    if let Some(path) = dest {
        let payload = if path.extension().is_some_and(|e| e == "csv") {
            out.csv.clone().unwrap_or_else(|| text.clone())
        } else {
            text.clone()
        };
        if let Err(e) = fs::write(path, payload) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return 1;
        }
    }
    if out.pass {
        0
    } else {
        2
    }
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let defaults: FileDefaults = match &cli.config {
        None => FileDefaults::default(),
        Some(path) => match fs::read_to_string(path) {
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", path.display());
                return 1;
            }
            Ok(text) => match serde_json::from_str(&text) {
                Ok(d) => d,
                Err(e) => {
                    eprintln!("error: bad config {}: {e}", path.display());
                    return 1;
                }
            },
        },
    };
    if let Some(n) = cli.threads.or(defaults.threads) {
        // A later duplicate initialization (e.g. in tests) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let started = Instant::now();
    let (command, params, outcome) = run(&cli, &defaults);
    let wall_ms = started.elapsed().as_millis() as u64;
    match outcome {
        Ok(out) => emit(&command, params, &out, wall_ms, &cli.out),
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CmdError::Assertion { message, detail }) => {
            let out = Output::new(
                json!({"status": "fail", "message": message, "detail": detail}),
                format!("ASSERTION FAILED: {message}"),
                false,
            );
            emit(&command, params, &out, wall_ms, &cli.out);
            2
        }
    }
}

fn main() {
    std::process::exit(real_main());
}
