//! Landscape structure around each ground state and its ladder projection.
//!
//! The edge typical set around a ground state collects everything reachable
//! without exceeding the barrier Gamma once the bulk configurations at
//! energy Gamma are walled off. Below the barrier it splits into disjoint
//! well neighborhoods around a few representatives; at the barrier it is a
//! plateau of saddle states. The plateau plus the representatives carries a
//! finite graph with integer rates, and near each two-row canonical seed
//! that graph is an exact four- or eight-fold cover of the truncated ladder
//! graph, which is what makes the prefactor constants computable.

use crate::canonical::{
    bulk_sets, gamma_barrier, is_good_pair, make_config, regular_set, CanonicalError,
    CanonicalSpec, Corner, GrowthSide,
};
use crate::explore::{cutoff_component, ExploreError, ExploreLimits, LevelGraph};
use crate::ladder::{build_aux, project_aux, LadderError, ProjectedAux};
use crate::lattice::{
    apply_symmetry, delta_energy, enumerate_moves, ground_states, hamiltonian, Boundary, Energy,
    Lattice, LatticeError, SpinConfig, Symmetry,
};
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("edge structure requires an open boundary")]
    OpenBoundaryRequired,
    #[error("edge structure requires 5 <= K <= L")]
    RegimeRequired,
    #[error("({0}, {1}) is not a good pair")]
    BadPair(i8, i8),
    #[error("exploration truncated at {states} states; raise the limits")]
    Truncated { states: usize },
    #[error("well decomposition violated: {0}")]
    Decomposition(String),
    #[error("gateway structure violated: {0}")]
    Gateway(String),
    #[error("expected ladder family member missing from the graph: {0}")]
    MissingFamily(String),
    #[error("ladder images disagree on a shared vertex")]
    ImageConflict,
    #[error("edge away from the gateway set changes ladder image: {0}")]
    UnmappedEdgeSplit(String),
    #[error("rate mismatch over ladder edge {0}-{1}: graph {2}, ladder {3}")]
    RateMismatch(String, String, u32, u32),
    #[error("ladder edge {x}-{y} covered {found} times, expected {expected}")]
    MultiplicityMismatch { x: String, y: String, found: usize, expected: usize },
    #[error("ladder map is not surjective")]
    NotSurjective,
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error(transparent)]
    Ladder(#[from] LadderError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub(crate) fn require_regime(lat: &Lattice) -> Result<(), EdgeError> {
    if lat.boundary != Boundary::Open {
        return Err(EdgeError::OpenBoundaryRequired);
    }
    if !lat.paper_regime {
        return Err(EdgeError::RegimeRequired);
    }
    Ok(())
}

pub(crate) fn mono(lat: &Lattice, a: i8) -> SpinConfig {
    let [minus, zero, plus] = ground_states(lat);
    match a {
        -1 => minus,
        0 => zero,
        _ => plus,
    }
}

/// Bulk configurations at energy exactly Gamma, for both phase boundaries.
/// These separate the edge typical sets from the bulk ladder.
fn gamma_walls(lat: &Lattice) -> Result<Vec<SpinConfig>, EdgeError> {
    let mut walls = bulk_sets(lat, (-1, 0))?.1;
    walls.extend(bulk_sets(lat, (0, 1))?.1);
    Ok(walls)
}

/// The edge typical set around one ground state, split by energy level.
#[derive(Debug, Clone)]
pub struct EdgeTypical {
    pub a: i8,
    pub gamma: Energy,
    /// Everything reachable from the ground state at energies up to Gamma,
    /// avoiding the bulk wall.
    pub graph: LevelGraph,
    /// Well representatives: the ground state itself, then the two-row
    /// canonical configurations for each good pair.
    pub reps: Vec<SpinConfig>,
    /// Members of each representative's sub-barrier neighborhood.
    pub nbhd: Vec<Vec<SpinConfig>>,
    rep_of: HashMap<SpinConfig, usize>,
}

impl EdgeTypical {
    /// Plateau members (energy exactly Gamma) in discovery order.
    pub fn plateau(&self) -> Vec<SpinConfig> {
        self.graph
            .verts
            .iter()
            .zip(&self.graph.energies)
            .filter(|&(_, &e)| e == self.gamma)
            .map(|(c, _)| *c)
            .collect()
    }

    /// Which representative's neighborhood a sub-barrier member belongs to.
    pub fn rep_of(&self, cfg: &SpinConfig) -> Option<usize> {
        self.rep_of.get(cfg).copied()
    }
}

/// Builds the edge typical set around ground state `a` and verifies its
/// decomposition into plateau plus disjoint well neighborhoods.
pub fn edge_typical(
    lat: &Lattice,
    a: i8,
    limits: &ExploreLimits,
) -> Result<EdgeTypical, EdgeError> {
    require_regime(lat)?;
    let gamma = gamma_barrier(lat);
    let walls = gamma_walls(lat)?;
    let seed = mono(lat, a);
    let graph = cutoff_component(lat, &[seed], gamma, &walls, limits)?;
    if graph.truncated {
        return Err(EdgeError::Truncated { states: graph.n_verts() });
    }

    let mut reps = vec![seed];
    for b in [-1i8, 0, 1] {
        if is_good_pair(a, b) {
            reps.extend(regular_set(lat, (a, b), 2)?);
        }
    }
    let mut nbhd = Vec::with_capacity(reps.len());
    let mut rep_of: HashMap<SpinConfig, usize> = HashMap::new();
    for (ri, rep) in reps.iter().enumerate() {
        let well = cutoff_component(lat, &[*rep], gamma - 1, &[], limits)?;
        if well.truncated {
            return Err(EdgeError::Truncated { states: well.n_verts() });
        }
        for cfg in &well.verts {
            if !graph.contains(cfg) {
                return Err(EdgeError::Decomposition(format!(
                    "well member of representative {ri} escapes the typical set"
                )));
            }
            if let Some(prev) = rep_of.insert(*cfg, ri) {
                return Err(EdgeError::Decomposition(format!(
                    "wells of representatives {prev} and {ri} overlap"
                )));
            }
        }
        nbhd.push(well.verts);
    }
    // Every sub-barrier member of the typical set lies in exactly one well.
    for (cfg, &e) in graph.verts.iter().zip(&graph.energies) {
        if e < gamma && !rep_of.contains_key(cfg) {
            return Err(EdgeError::Decomposition(
                "sub-barrier member not covered by any well".into(),
            ));
        }
    }
    Ok(EdgeTypical { a, gamma, graph, reps, nbhd, rep_of })
}

/// Gateway configurations between the two phases of a good pair: the
/// barrier-level states connected to the two-row seeds on either side of the
/// bulk ladder, avoiding the bulk wall, plus the bulk itself.
#[derive(Debug, Clone)]
pub struct GatewaySets {
    pub pair: (i8, i8),
    /// Reachable from the two-row seed on the `a` side.
    pub z_ab: Vec<SpinConfig>,
    /// Reachable from the two-row seed on the `b` side.
    pub z_ba: Vec<SpinConfig>,
    pub bulk: Vec<SpinConfig>,
}

impl GatewaySets {
    /// The full gateway collection (both sides plus the bulk).
    pub fn members(&self) -> HashSet<SpinConfig> {
        self.z_ab
            .iter()
            .chain(&self.z_ba)
            .chain(&self.bulk)
            .copied()
            .collect()
    }
}

/// Component of configurations at energy exactly `level` reachable from the
/// seeds (which sit below the level) without entering the forbidden set.
fn level_component(
    lat: &Lattice,
    seeds: &[SpinConfig],
    level: Energy,
    forbidden: &HashSet<SpinConfig>,
    limits: &ExploreLimits,
) -> Result<Vec<SpinConfig>, EdgeError> {
    let mut seen: HashSet<SpinConfig> = HashSet::new();
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let push = |cfg: SpinConfig,
                    out: &mut Vec<SpinConfig>,
                    queue: &mut VecDeque<SpinConfig>,
                    seen: &mut HashSet<SpinConfig>| {
        if !forbidden.contains(&cfg) && seen.insert(cfg) {
            out.push(cfg);
            queue.push_back(cfg);
        }
    };
    for seed in seeds {
        let base = hamiltonian(lat, seed);
        for (site, spin) in enumerate_moves(lat, seed) {
            if base + delta_energy(lat, seed, site, spin) == level {
                push(seed.with_spin(site, spin), &mut out, &mut queue, &mut seen);
            }
        }
    }
    while let Some(cfg) = queue.pop_front() {
        if out.len() > limits.max_states {
            return Err(EdgeError::Truncated { states: out.len() });
        }
        for (site, spin) in enumerate_moves(lat, &cfg) {
            if delta_energy(lat, &cfg, site, spin) == 0 {
                push(cfg.with_spin(site, spin), &mut out, &mut queue, &mut seen);
            }
        }
    }
    Ok(out)
}

/// Builds the gateway sets for a good pair and checks that the three parts
/// are disjoint.
pub fn gateway_sets(
    lat: &Lattice,
    pair: (i8, i8),
    limits: &ExploreLimits,
) -> Result<GatewaySets, EdgeError> {
    let (a, b) = pair;
    if !is_good_pair(a, b) {
        return Err(EdgeError::BadPair(a, b));
    }
    require_regime(lat)?;
    let gamma = gamma_barrier(lat);
    let (bulk, wall) = bulk_sets(lat, pair)?;
    let wall: HashSet<SpinConfig> = wall.into_iter().collect();
    let z_ab = level_component(lat, &regular_set(lat, (a, b), 2)?, gamma, &wall, limits)?;
    let z_ba = level_component(lat, &regular_set(lat, (b, a), 2)?, gamma, &wall, limits)?;
    let za: HashSet<_> = z_ab.iter().collect();
    if z_ba.iter().any(|c| za.contains(c)) {
        return Err(EdgeError::Gateway("the two gateway sides intersect".into()));
    }
    let bk: HashSet<_> = bulk.iter().collect();
    if z_ab.iter().chain(&z_ba).any(|c| bk.contains(c)) {
        return Err(EdgeError::Gateway("gateway side intersects the bulk".into()));
    }
    Ok(GatewaySets { pair, z_ab, z_ba, bulk })
}

/// Checks the exit structure of the gateway collection: any neighbor at
/// energy at most Gamma outside it must belong to the well of one of the two
/// ground states, entered from the matching gateway side.
pub fn verify_gateway_boundary(
    lat: &Lattice,
    gs: &GatewaySets,
    limits: &ExploreLimits,
) -> Result<(), EdgeError> {
    let gamma = gamma_barrier(lat);
    let (a, b) = gs.pair;
    let well = |s: i8| -> Result<HashSet<SpinConfig>, EdgeError> {
        let g = cutoff_component(lat, &[mono(lat, s)], gamma - 1, &[], limits)?;
        Ok(g.verts.into_iter().collect())
    };
    let well_a = well(a)?;
    let well_b = well(b)?;
    let members = gs.members();
    let side_a: HashSet<_> = gs.z_ab.iter().collect();
    let side_b: HashSet<_> = gs.z_ba.iter().collect();
    for sigma in &members {
        let base = hamiltonian(lat, sigma);
        for (site, spin) in enumerate_moves(lat, sigma) {
            if base + delta_energy(lat, sigma, site, spin) > gamma {
                continue;
            }
            let zeta = sigma.with_spin(site, spin);
            if members.contains(&zeta) {
                continue;
            }
            let ok = (well_a.contains(&zeta) && side_a.contains(sigma))
                || (well_b.contains(&zeta) && side_b.contains(sigma));
            if !ok {
                return Err(EdgeError::Gateway(
                    "exit not into a ground-state well from the matching side".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Vertex role in the projected graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexKind {
    /// A configuration at energy exactly Gamma.
    Plateau,
    /// A well representative standing for its whole neighborhood.
    Representative,
}

/// Finite graph on the barrier plateau plus the well representatives, with
/// integer rates: one per direct single-flip adjacency between plateau
/// members, and the count of adjacent well members toward a representative.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    pub a: i8,
    pub typical: EdgeTypical,
    pub verts: Vec<SpinConfig>,
    pub kinds: Vec<VertexKind>,
    /// Symmetric rates keyed by (low index, high index).
    pub rates: BTreeMap<(u32, u32), u32>,
    index: HashMap<SpinConfig, u32>,
}

impl EdgeGraph {
    pub fn index_of(&self, cfg: &SpinConfig) -> Option<u32> {
        self.index.get(cfg).copied()
    }

    pub fn rate(&self, i: u32, j: u32) -> u32 {
        self.rates.get(&(i.min(j), i.max(j))).copied().unwrap_or(0)
    }

    pub fn n_verts(&self) -> usize {
        self.verts.len()
    }

    pub fn neighbors(&self, i: u32) -> Vec<(u32, u32)> {
        self.rates
            .iter()
            .filter_map(|(&(x, y), &r)| {
                if x == i {
                    Some((y, r))
                } else if y == i {
                    Some((x, r))
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Builds the projected graph around ground state `a`.
pub fn build_edge_graph(
    lat: &Lattice,
    a: i8,
    limits: &ExploreLimits,
) -> Result<EdgeGraph, EdgeError> {
    let typical = edge_typical(lat, a, limits)?;
    let mut verts = typical.plateau();
    let mut kinds = vec![VertexKind::Plateau; verts.len()];
    for rep in &typical.reps {
        verts.push(*rep);
        kinds.push(VertexKind::Representative);
    }
    let index: HashMap<SpinConfig, u32> =
        verts.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();

    let mut rates: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    let gamma = typical.gamma;
    for &(u, w) in &typical.graph.edges {
        let (eu, ew) = (typical.graph.energies[u as usize], typical.graph.energies[w as usize]);
        let (cu, cw) = (typical.graph.verts[u as usize], typical.graph.verts[w as usize]);
        if eu == gamma && ew == gamma {
            let (i, j) = (index[&cu], index[&cw]);
            rates.insert((i.min(j), i.max(j)), 1);
        } else if eu == gamma || ew == gamma {
            let (top, low) = if eu == gamma { (cu, cw) } else { (cw, cu) };
            let rep = typical.rep_of(&low).expect("sub-barrier member has a well");
            let (i, j) = (index[&top], index[&typical.reps[rep]]);
            *rates.entry((i.min(j), i.max(j))).or_insert(0) += 1;
        }
    }
    Ok(EdgeGraph { a, typical, verts, kinds, rates, index })
}

/// One corner-strip family of the ladder correspondence, determined by the
/// growth side of the seed, the protuberance corner, and (on square
/// lattices) transposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Family {
    pub side: GrowthSide,
    pub corner: Corner,
    pub transposed: bool,
}

/// Total map from the projected graph onto the truncated ladder.
#[derive(Debug, Clone)]
pub struct LadderMap {
    pub pair: (i8, i8),
    pub aux: ProjectedAux,
    /// Ladder vertex id per graph vertex; unlisted structure collapses to
    /// the absorbed vertex.
    pub images: Vec<u32>,
    pub families: Vec<Family>,
}

/// The strip configuration bridging a one-row protuberance toward the well:
/// a full growth row missing its far-corner site, plus a strip of length `h`
/// in the next row.
fn strip_config(
    lat: &Lattice,
    pair: (i8, i8),
    h: usize,
    fam: Family,
) -> Result<SpinConfig, EdgeError> {
    let (a, b) = pair;
    let k = lat.k;
    let mut cfg = SpinConfig::constant(lat.n_sites(), a)?;
    for col in 1..k {
        cfg.set_spin(lat.site(col, 1), b);
    }
    for col in 1..=h {
        cfg.set_spin(lat.site(col, 2), b);
    }
    if fam.corner == Corner::Right {
        cfg = apply_symmetry(lat, &cfg, Symmetry::HFlip)?;
    }
    if fam.side == GrowthSide::Top {
        cfg = apply_symmetry(lat, &cfg, Symmetry::VFlip)?;
    }
    if fam.transposed {
        cfg = apply_symmetry(lat, &cfg, Symmetry::Transpose)?;
    }
    Ok(cfg)
}

/// Members of one family with their ladder images; `None` is the absorbed
/// vertex.
fn family_members(
    lat: &Lattice,
    pair: (i8, i8),
    fam: Family,
) -> Result<Vec<(SpinConfig, Option<(usize, usize)>)>, EdgeError> {
    let k = lat.k;
    let mut out = Vec::with_capacity(2 * k);
    out.push((mono(lat, pair.0), None));
    let seed = CanonicalSpec::regular(pair, 2, fam.side).transposed(fam.transposed);
    out.push((make_config(lat, &seed)?, Some((0, 0))));
    for h in 1..k {
        let spec =
            CanonicalSpec::protuberance(pair, 1, h, fam.side, fam.corner).transposed(fam.transposed);
        out.push((make_config(lat, &spec)?, Some((k - h, 0))));
        out.push((strip_config(lat, pair, h, fam)?, Some((k - h, 1))));
    }
    Ok(out)
}

fn aux_name(aux: &ProjectedAux, v: u32) -> String {
    if v == aux.dagger {
        "dagger".into()
    } else {
        let (c, r) = aux.verts[v as usize];
        format!("({c},{r})")
    }
}

/// Constructs the ladder map for a good pair over the projected graph around
/// `pair.0`, then verifies the full correspondence: family members exhaust
/// the gateway side, non-gateway edges collapse, rates transfer exactly, and
/// every ladder edge is covered exactly four times (eight on square
/// lattices).
pub fn ladder_map(
    lat: &Lattice,
    pair: (i8, i8),
    graph: &EdgeGraph,
    gs: &GatewaySets,
) -> Result<LadderMap, EdgeError> {
    let (a, b) = pair;
    if !is_good_pair(a, b) {
        return Err(EdgeError::BadPair(a, b));
    }
    assert_eq!(graph.a, a, "graph must be built around the first spin of the pair");
    assert_eq!(gs.pair, pair, "gateway sets must match the pair");
    let aux = project_aux(&build_aux(lat.k)?);
    let square = lat.k == lat.l;
    let mut families = Vec::new();
    for side in [GrowthSide::Bottom, GrowthSide::Top] {
        for corner in [Corner::Left, Corner::Right] {
            families.push(Family { side, corner, transposed: false });
            if square {
                families.push(Family { side, corner, transposed: true });
            }
        }
    }

    let n = graph.n_verts();
    let mut images = vec![aux.dagger; n];
    let mut assigned = vec![false; n];
    let mut family_edges: Vec<HashSet<(u32, u32)>> = vec![HashSet::new(); families.len()];
    for (fi, fam) in families.iter().enumerate() {
        for (cfg, img) in family_members(lat, pair, *fam)? {
            let idx = graph
                .index_of(&cfg)
                .ok_or_else(|| EdgeError::MissingFamily(format!("{fam:?}")))?;
            let target = match img {
                None => aux.dagger,
                Some((c, r)) => aux
                    .vertex(c, r)
                    .ok_or_else(|| EdgeError::MissingFamily(format!("ladder vertex ({c},{r})")))?,
            };
            if assigned[idx as usize] && images[idx as usize] != target {
                return Err(EdgeError::ImageConflict);
            }
            images[idx as usize] = target;
            assigned[idx as usize] = true;
            family_edges[fi].insert((idx, target));
        }
    }

    // The mapped region must be exactly the seed, the gateway side, and the
    // two-row representatives.
    let z_set: HashSet<&SpinConfig> = gs.z_ab.iter().collect();
    let r2: HashSet<SpinConfig> = regular_set(lat, pair, 2)?.into_iter().collect();
    for (i, cfg) in graph.verts.iter().enumerate() {
        let interior = images[i] != aux.dagger;
        let in_domain = z_set.contains(cfg) || r2.contains(cfg);
        if interior != in_domain {
            return Err(EdgeError::Decomposition(
                "mapped region does not match seed plus gateway side".into(),
            ));
        }
    }
    for cfg in &gs.z_ab {
        if graph.index_of(cfg).is_none() {
            return Err(EdgeError::Gateway(
                "gateway member missing from the projected graph".into(),
            ));
        }
    }

    let aux_rate: HashMap<(u32, u32), u32> =
        aux.edges.iter().map(|&(x, y, r)| ((x.min(y), x.max(y)), r)).collect();
    let mut coverage: HashMap<(u32, u32), usize> = HashMap::new();
    for (&(i, j), &r) in &graph.rates {
        let (ci, cj) = (&graph.verts[i as usize], &graph.verts[j as usize]);
        let touches_z = z_set.contains(ci) || z_set.contains(cj);
        let (x, y) = (images[i as usize], images[j as usize]);
        if !touches_z {
            if x != y {
                return Err(EdgeError::UnmappedEdgeSplit(format!(
                    "{} vs {}",
                    aux_name(&aux, x),
                    aux_name(&aux, y)
                )));
            }
            continue;
        }
        let key = (x.min(y), x.max(y));
        let Some(&lr) = aux_rate.get(&key) else {
            return Err(EdgeError::RateMismatch(aux_name(&aux, x), aux_name(&aux, y), r, 0));
        };
        if lr != r {
            return Err(EdgeError::RateMismatch(aux_name(&aux, x), aux_name(&aux, y), r, lr));
        }
        *coverage.entry(key).or_insert(0) += 1;
    }
    let expected = if square { 8 } else { 4 };
    for &(x, y, _) in &aux.edges {
        let key = (x.min(y), x.max(y));
        let found = coverage.get(&key).copied().unwrap_or(0);
        if found != expected {
            return Err(EdgeError::MultiplicityMismatch {
                x: aux_name(&aux, x),
                y: aux_name(&aux, y),
                found,
                expected,
            });
        }
    }
    let mut seen: HashSet<u32> = images.iter().copied().collect();
    seen.insert(aux.dagger);
    if seen.len() != aux.n_verts() {
        return Err(EdgeError::NotSurjective);
    }
    Ok(LadderMap { pair, aux, images, families })
}
