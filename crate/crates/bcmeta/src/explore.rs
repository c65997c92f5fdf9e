//! Energy-cutoff exploration of the configuration graph.
//!
//! The central object is the cutoff component: the set of configurations
//! reachable from a seed set through single-site updates while never
//! exceeding a given energy, optionally avoiding a forbidden set. With the
//! cutoff at the barrier Gamma this realizes the typical neighborhoods of
//! the ground states; one level lower it isolates the states a trajectory
//! can reach without crossing a saddle.

use crate::canonical::{canonical_path, gamma_barrier, CanonicalError, PathChoices};
use crate::lattice::{
    delta_energy, enumerate_moves, ground_states, hamiltonian, Energy, Lattice, LatticeError,
    SpinConfig,
};
use std::collections::{HashMap, HashSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("seed has energy {energy}, above the cutoff {cutoff}")]
    SeedAboveCutoff { energy: Energy, cutoff: Energy },
    #[error("seed lies in the forbidden set")]
    SeedForbidden,
    #[error("exploration budget exceeded: {states} states, {edges} edges")]
    BudgetExceeded { states: usize, edges: usize },
    #[error("no connection within budget {budget}")]
    Unreachable { budget: Energy },
    #[error("lattice has {sites} sites; exact enumeration capped at {max}")]
    TooLarge { sites: usize, max: usize },
    #[error("barrier mismatch for pair ({0}, {1}): {2}")]
    BarrierMismatch(i8, i8, String),
    #[error("lattice outside the 5 <= K <= L regime; pass the small-lattice override to measure instead")]
    NotPaperRegime,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// Exploration budgets; exceeding them marks the graph truncated.
#[derive(Debug, Clone, Copy)]
pub struct ExploreLimits {
    pub max_states: usize,
    pub max_edges: usize,
}

impl Default for ExploreLimits {
    fn default() -> Self {
        ExploreLimits { max_states: 20_000_000, max_edges: 200_000_000 }
    }
}

/// A cutoff component: vertices, their energies, and the induced edges.
#[derive(Debug, Clone)]
pub struct LevelGraph {
    pub cutoff: Energy,
    /// Vertices in deterministic discovery order.
    pub verts: Vec<SpinConfig>,
    pub energies: Vec<Energy>,
    /// Undirected single-flip edges (low index, high index).
    pub edges: Vec<(u32, u32)>,
    /// True when a budget stopped the exploration; downstream verification
    /// rejects truncated graphs.
    pub truncated: bool,
    index: HashMap<SpinConfig, u32>,
}

impl LevelGraph {
    pub fn n_verts(&self) -> usize {
        self.verts.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, cfg: &SpinConfig) -> bool {
        self.index.contains_key(cfg)
    }

    pub fn index_of(&self, cfg: &SpinConfig) -> Option<u32> {
        self.index.get(cfg).copied()
    }

    /// Vertex count per energy level, ascending.
    pub fn level_counts(&self) -> Vec<(Energy, usize)> {
        let mut counts: std::collections::BTreeMap<Energy, usize> = Default::default();
        for &e in &self.energies {
            *counts.entry(e).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }
}

/// Incremental breadth-first explorer supporting cutoff raises.
struct Explorer<'a> {
    lat: &'a Lattice,
    forbidden: HashSet<SpinConfig>,
    limits: ExploreLimits,
    cutoff: Energy,
    verts: Vec<SpinConfig>,
    energies: Vec<Energy>,
    edges: Vec<(u32, u32)>,
    index: HashMap<SpinConfig, u32>,
    queue: VecDeque<u32>,
    /// Discovered targets above the cutoff, kept for later raises.
    blocked: Vec<(SpinConfig, Energy)>,
    truncated: bool,
}

impl<'a> Explorer<'a> {
    fn new(
        lat: &'a Lattice,
        seeds: &[SpinConfig],
        cutoff: Energy,
        forbidden: &[SpinConfig],
        limits: ExploreLimits,
    ) -> Result<Self, ExploreError> {
        let forbidden: HashSet<SpinConfig> = forbidden.iter().copied().collect();
        let mut ex = Explorer {
            lat,
            forbidden,
            limits,
            cutoff,
            verts: Vec::new(),
            energies: Vec::new(),
            edges: Vec::new(),
            index: HashMap::new(),
            queue: VecDeque::new(),
            blocked: Vec::new(),
            truncated: false,
        };
        for seed in seeds {
            let energy = hamiltonian(lat, seed);
            if energy > cutoff {
                return Err(ExploreError::SeedAboveCutoff { energy, cutoff });
            }
            if ex.forbidden.contains(seed) {
                return Err(ExploreError::SeedForbidden);
            }
            ex.insert(*seed, energy);
        }
        ex.run();
        Ok(ex)
    }

    fn insert(&mut self, cfg: SpinConfig, energy: Energy) {
        if self.index.contains_key(&cfg) {
            return;
        }
        if self.verts.len() >= self.limits.max_states {
            self.truncated = true;
            return;
        }
        let id = self.verts.len() as u32;
        self.index.insert(cfg, id);
        self.verts.push(cfg);
        self.energies.push(energy);
        self.queue.push_back(id);
    }

    fn run(&mut self) {
        while let Some(v) = self.queue.pop_front() {
            if self.truncated {
                return;
            }
            let cfg = self.verts[v as usize];
            let energy = self.energies[v as usize];
            for (site, spin) in enumerate_moves(self.lat, &cfg) {
                let target_energy = energy + delta_energy(self.lat, &cfg, site, spin);
                let target = cfg.with_spin(site, spin);
                if self.forbidden.contains(&target) {
                    continue;
                }
                if target_energy > self.cutoff {
                    self.blocked.push((target, target_energy));
                    continue;
                }
                match self.index.get(&target) {
                    Some(&w) if w < v => {
                        // Each edge is recorded at its later-discovered
                        // endpoint; the earlier one was processed first.
                        if self.edges.len() >= self.limits.max_edges {
                            self.truncated = true;
                            return;
                        }
                        self.edges.push((w, v));
                    }
                    Some(_) => {}
                    None => self.insert(target, target_energy),
                }
            }
        }
    }

    /// Raises the cutoff and resumes, releasing previously blocked targets.
    fn raise_cutoff(&mut self, cutoff: Energy) {
        assert!(cutoff >= self.cutoff);
        self.cutoff = cutoff;
        let blocked = std::mem::take(&mut self.blocked);
        for (cfg, energy) in blocked {
            if energy > cutoff {
                self.blocked.push((cfg, energy));
            } else {
                self.insert(cfg, energy);
            }
        }
        self.run();
    }

    fn into_graph(self) -> LevelGraph {
        LevelGraph {
            cutoff: self.cutoff,
            verts: self.verts,
            energies: self.energies,
            edges: self.edges,
            truncated: self.truncated,
            index: self.index,
        }
    }
}

/// The component of the seed set under single-site moves with energies
/// at most `cutoff`, avoiding the forbidden set. A truncated result (budget
/// hit) is returned with its flag set rather than as an error.
pub fn cutoff_component(
    lat: &Lattice,
    seeds: &[SpinConfig],
    cutoff: Energy,
    forbidden: &[SpinConfig],
    limits: &ExploreLimits,
) -> Result<LevelGraph, ExploreError> {
    Ok(Explorer::new(lat, seeds, cutoff, forbidden, *limits)?.into_graph())
}

/// Least maximal energy over paths from sigma to the target set, found by an
/// ascending sweep of cutoff levels reusing the explored frontier.
pub fn communication_height_to_set(
    lat: &Lattice,
    sigma: &SpinConfig,
    targets: &[SpinConfig],
    budget: Energy,
    limits: &ExploreLimits,
) -> Result<Energy, ExploreError> {
    let base = hamiltonian(lat, sigma);
    if targets.iter().any(|t| t == sigma) {
        return Ok(base);
    }
    if base > budget {
        return Err(ExploreError::Unreachable { budget });
    }
    let mut ex = Explorer::new(lat, std::slice::from_ref(sigma), base, &[], *limits)?;
    let mut level = base;
    loop {
        if ex.truncated {
            return Err(ExploreError::BudgetExceeded {
                states: ex.verts.len(),
                edges: ex.edges.len(),
            });
        }
        if targets.iter().any(|t| ex.index.contains_key(t)) {
            return Ok(level);
        }
        if level >= budget {
            return Err(ExploreError::Unreachable { budget });
        }
        level += 1;
        ex.raise_cutoff(level);
    }
}

/// Communication height between two configurations.
pub fn communication_height(
    lat: &Lattice,
    sigma: &SpinConfig,
    zeta: &SpinConfig,
    budget: Energy,
    limits: &ExploreLimits,
) -> Result<Energy, ExploreError> {
    communication_height_to_set(lat, sigma, std::slice::from_ref(zeta), budget, limits)
}

/// Maximum number of sites for the exact min-max oracle.
pub const BRUTE_FORCE_MAX_SITES: usize = 12;

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra as usize] = rb;
        }
    }
}

/// Exact communication height by full enumeration: sort all single-flip
/// edges by the larger endpoint energy and sweep with union-find until the
/// two configurations merge.
pub fn brute_force_min_max(
    lat: &Lattice,
    sigma: &SpinConfig,
    zeta: &SpinConfig,
) -> Result<Energy, ExploreError> {
    let sites = lat.n_sites();
    if sites > BRUTE_FORCE_MAX_SITES {
        return Err(ExploreError::TooLarge { sites, max: BRUTE_FORCE_MAX_SITES });
    }
    if sigma == zeta {
        return Ok(hamiltonian(lat, sigma));
    }
    let n = 3usize.pow(sites as u32);
    let mut energy = vec![0i32; n];
    let mut cfg = SpinConfig::constant(sites, -1).expect("size checked");
    for idx in 0..n {
        // Decode incrementally: idx differs from idx-1 in trailing trits.
        let mut rem = idx;
        let mut site = 0;
        while rem > 0 && site < sites {
            cfg.set_code(site, (rem % 3) as u8);
            rem /= 3;
            site += 1;
        }
        for s in site..sites {
            cfg.set_code(s, 0);
        }
        energy[idx] = hamiltonian(lat, &cfg) as i32;
    }
    let mut edges: Vec<(i32, u32, u32)> = Vec::with_capacity(n * sites);
    let mut pow = vec![0usize; sites];
    for (s, p) in pow.iter_mut().enumerate() {
        *p = 3usize.pow(s as u32);
    }
    for idx in 0..n {
        for site in 0..sites {
            let code = (idx / pow[site]) % 3;
            for nc in code + 1..3 {
                let jdx = idx + (nc - code) * pow[site];
                edges.push((energy[idx].max(energy[jdx]), idx as u32, jdx as u32));
            }
        }
    }
    edges.sort_unstable_by_key(|&(w, _, _)| w);
    let si = state_number(sigma, sites);
    let zi = state_number(zeta, sites);
    let mut uf = UnionFind::new(n);
    let mut i = 0;
    while i < edges.len() {
        let level = edges[i].0;
        while i < edges.len() && edges[i].0 == level {
            let (_, a, b) = edges[i];
            uf.union(a, b);
            i += 1;
        }
        if uf.find(si) == uf.find(zi) {
            // Path max includes the endpoints themselves.
            return Ok((level.max(energy[si as usize]).max(energy[zi as usize])) as Energy);
        }
    }
    unreachable!("full configuration graph is connected");
}

fn state_number(cfg: &SpinConfig, sites: usize) -> u32 {
    let mut idx = 0usize;
    for s in (0..sites).rev() {
        idx = idx * 3 + cfg.code(s) as usize;
    }
    idx as u32
}

/// Outcome of barrier verification for one pair of ground states.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PairBarrier {
    pub pair: (i8, i8),
    /// Least path maximum found (the barrier realized).
    pub barrier: Energy,
    /// True when no path below `barrier` exists (confirmed lower bound).
    pub lower_confirmed: bool,
    pub explored_states: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BarrierReport {
    /// The closed-form barrier, when the lattice is in the asserted regime.
    pub formula: Option<Energy>,
    pub pairs: Vec<PairBarrier>,
}

/// Verifies the energy barrier between all pairs of ground states.
///
/// In the 5 <= K <= L regime this asserts the closed form: a canonical path
/// realizes it from above, and the cutoff component one level below each
/// ground state excludes the other two. Small lattices require the override
/// and report the exact brute-force barrier instead.
pub fn verify_barrier(
    lat: &Lattice,
    limits: &ExploreLimits,
    allow_small: bool,
) -> Result<BarrierReport, ExploreError> {
    let [minus, zero, plus] = ground_states(lat);
    let pairs = [(-1i8, 0i8), (0, 1), (-1, 1)];
    let of = |s: i8| match s {
        -1 => minus,
        0 => zero,
        _ => plus,
    };
    if !lat.paper_regime {
        if !allow_small {
            return Err(ExploreError::NotPaperRegime);
        }
        let mut out = Vec::new();
        for (a, b) in pairs {
            let barrier = brute_force_min_max(lat, &of(a), &of(b))?;
            out.push(PairBarrier { pair: (a, b), barrier, lower_confirmed: true, explored_states: 0 });
        }
        return Ok(BarrierReport { formula: None, pairs: out });
    }

    let gamma = gamma_barrier(lat);
    let mut out = Vec::new();
    for (a, b) in pairs {
        // Upper bound: a path realizing max energy gamma. The (-1,+1) pair
        // concatenates canonical paths through the zero phase.
        let mut profile_max = 0;
        let legs: Vec<(i8, i8)> = if (a, b) == (-1, 1) {
            vec![(-1, 0), (0, 1)]
        } else {
            vec![(a, b)]
        };
        for (x, y) in legs {
            let path = canonical_path(lat, x, y, &PathChoices::bottom_left(lat.l))?;
            for c in &path {
                profile_max = profile_max.max(hamiltonian(lat, c));
            }
        }
        if profile_max != gamma {
            return Err(ExploreError::BarrierMismatch(
                a,
                b,
                format!("canonical path peaks at {profile_max}, expected {gamma}"),
            ));
        }
        // Lower bound: one level below gamma the start cannot reach the end.
        let graph = cutoff_component(lat, &[of(a)], gamma - 1, &[], limits)?;
        if graph.truncated {
            return Err(ExploreError::BudgetExceeded {
                states: graph.n_verts(),
                edges: graph.n_edges(),
            });
        }
        if graph.contains(&of(b)) {
            return Err(ExploreError::BarrierMismatch(
                a,
                b,
                format!("connected below the barrier at cutoff {}", gamma - 1),
            ));
        }
        out.push(PairBarrier {
            pair: (a, b),
            barrier: gamma,
            lower_confirmed: true,
            explored_states: graph.n_verts(),
        });
    }
    Ok(BarrierReport { formula: Some(gamma), pairs: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{bulk_sets, regular_set};
    use crate::lattice::{build_lattice, Boundary};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn limits() -> ExploreLimits {
        ExploreLimits::default()
    }

    #[test]
    fn seed_validation() {
        let lat = build_lattice(5, 6, Boundary::Open).unwrap();
        let [minus, _, _] = ground_states(&lat);
        let r2 = regular_set(&lat, (-1, 0), 2).unwrap();
        assert!(matches!(
            cutoff_component(&lat, &[r2[0]], 4, &[], &limits()),
            Err(ExploreError::SeedAboveCutoff { energy: 5, cutoff: 4 })
        ));
        assert!(matches!(
            cutoff_component(&lat, &[minus], 5, &[minus], &limits()),
            Err(ExploreError::SeedForbidden)
        ));
    }

    #[test]
    fn component_below_barrier_has_expected_members() {
        let lat = build_lattice(5, 6, Boundary::Open).unwrap();
        let [minus, zero, plus] = ground_states(&lat);
        let graph = cutoff_component(&lat, &[minus], 5, &[], &limits()).unwrap();
        assert!(!graph.truncated);
        assert!(graph.energies.iter().all(|&e| e <= 5));
        // The single-row configurations are reachable below the barrier.
        for cfg in regular_set(&lat, (-1, 0), 1).unwrap() {
            assert!(graph.contains(&cfg));
        }
        assert!(!graph.contains(&zero));
        assert!(!graph.contains(&plus));
    }

    #[test]
    fn truncation_flag_on_tiny_budget() {
        let lat = build_lattice(5, 6, Boundary::Open).unwrap();
        let [minus, _, _] = ground_states(&lat);
        let tight = ExploreLimits { max_states: 10, max_edges: 1000 };
        let graph = cutoff_component(&lat, &[minus], 5, &[], &tight).unwrap();
        assert!(graph.truncated);
        assert_eq!(graph.n_verts(), 10);
    }

    #[test]
    fn monotone_in_cutoff() {
        let lat = build_lattice(4, 5, Boundary::Open).unwrap();
        let [minus, _, _] = ground_states(&lat);
        let mut prev = 0;
        for cutoff in 0..=5 {
            let graph = cutoff_component(&lat, &[minus], cutoff, &[], &limits()).unwrap();
            assert!(graph.n_verts() >= prev);
            prev = graph.n_verts();
        }
    }

    #[test]
    fn communication_heights_on_5x6() {
        let lat = build_lattice(5, 6, Boundary::Open).unwrap();
        let [minus, zero, plus] = ground_states(&lat);
        assert_eq!(communication_height(&lat, &minus, &minus, 10, &limits()).unwrap(), 0);
        assert_eq!(communication_height(&lat, &minus, &zero, 10, &limits()).unwrap(), 6);
        assert_eq!(communication_height(&lat, &minus, &plus, 10, &limits()).unwrap(), 6);
        assert!(matches!(
            communication_height(&lat, &minus, &zero, 5, &limits()),
            Err(ExploreError::Unreachable { budget: 5 })
        ));
    }

    #[test]
    fn barrier_reports() {
        let lat = build_lattice(5, 5, Boundary::Open).unwrap();
        let report = verify_barrier(&lat, &limits(), false).unwrap();
        assert_eq!(report.formula, Some(6));
        assert_eq!(report.pairs.len(), 3);
        assert!(report.pairs.iter().all(|p| p.barrier == 6 && p.lower_confirmed));

        let small = build_lattice(3, 4, Boundary::Open).unwrap();
        assert!(matches!(
            verify_barrier(&small, &limits(), false),
            Err(ExploreError::NotPaperRegime)
        ));
        let report = verify_barrier(&small, &limits(), true).unwrap();
        assert_eq!(report.formula, None);
        // All three barriers coincide even on the oracle lattice.
        let b = report.pairs[0].barrier;
        assert!(report.pairs.iter().all(|p| p.barrier == b));
    }

    #[test]
    fn oracle_matches_sweep_on_3x3() {
        let lat = build_lattice(3, 3, Boundary::Open).unwrap();
        let [minus, zero, plus] = ground_states(&lat);
        let phi = brute_force_min_max(&lat, &minus, &zero).unwrap();
        assert_eq!(
            communication_height(&lat, &minus, &zero, 40, &limits()).unwrap(),
            phi
        );
        // Symmetry of the min-max cost.
        assert_eq!(brute_force_min_max(&lat, &zero, &minus).unwrap(), phi);
        assert_eq!(brute_force_min_max(&lat, &minus, &plus).unwrap(), phi);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut a = SpinConfig::constant(9, -1).unwrap();
            let mut b = SpinConfig::constant(9, -1).unwrap();
            for s in 0..9 {
                a.set_code(s, rng.gen_range(0..3));
                b.set_code(s, rng.gen_range(0..3));
            }
            let exact = brute_force_min_max(&lat, &a, &b).unwrap();
            let swept = communication_height(&lat, &a, &b, 60, &limits()).unwrap();
            assert_eq!(exact, swept, "pair {a:?} {b:?}");
        }
    }

    #[test]
    fn set_decomposition_identity() {
        // N^(A u A'; B) = N^(A'; A u B) u N^(A; A' u B) for disjoint sets.
        let lat = build_lattice(4, 5, Boundary::Open).unwrap();
        let [minus, zero, _] = ground_states(&lat);
        let gamma = gamma_barrier(&lat);
        let b: Vec<SpinConfig> = regular_set(&lat, (-1, 0), 2).unwrap();
        let collect = |seeds: &[SpinConfig], forbidden: &[SpinConfig]| -> BTreeSet<SpinConfig> {
            let g = cutoff_component(&lat, seeds, gamma, forbidden, &limits()).unwrap();
            assert!(!g.truncated);
            g.verts.iter().copied().collect()
        };
        for forbidden in [vec![], b] {
            let lhs = collect(&[minus, zero], &forbidden);
            let mut with_minus = forbidden.clone();
            with_minus.push(minus);
            let mut with_zero = forbidden.clone();
            with_zero.push(zero);
            let rhs: BTreeSet<SpinConfig> = collect(&[zero], &with_minus)
                .union(&collect(&[minus], &with_zero))
                .copied()
                .collect();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn bulk_members_reachable_at_gamma() {
        // The protuberance configurations are inside the barrier-level
        // component of the ground states.
        let lat = build_lattice(5, 6, Boundary::Open).unwrap();
        let [minus, _, _] = ground_states(&lat);
        let graph = cutoff_component(&lat, &[minus], 6, &[], &limits()).unwrap();
        assert!(!graph.truncated);
        let (bulk, _) = bulk_sets(&lat, (-1, 0)).unwrap();
        for cfg in &bulk {
            assert!(graph.contains(cfg));
        }
        for cfg in regular_set(&lat, (-1, 0), 2).unwrap() {
            assert!(graph.contains(&cfg));
        }
    }
}
