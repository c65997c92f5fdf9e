//! Potential theory for finite reversible chains on weighted graphs.
//!
//! Everything here is unnormalized: vertex weights are nu(sigma) =
//! e^(-beta H), edge conductances are e^(-beta max(H, H')), and capacities
//! and Dirichlet forms carry a hidden factor of the partition function
//! relative to their probabilistic counterparts. The factor cancels in every
//! identity this crate checks, which keeps all quantities computable without
//! summing over the full state space.

use crate::lattice::{hamiltonian, Energy, Lattice, LatticeError, SpinConfig};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("conductance {c:.3e} on edge ({u},{v}) is below the 1e-300 floor; beta too large for this graph's energy span")]
    ConductanceFloor { u: u32, v: u32, c: f64 },
    #[error("graph is disconnected: vertex {0} unreachable")]
    Disconnected(u32),
    #[error("boundary sets invalid: {0}")]
    BadBoundary(String),
    #[error("flow has support on missing edge ({0},{1})")]
    IncompatibleSupport(u32, u32),
    #[error("zero flow")]
    ZeroFlow,
    #[error("lattice has {sites} sites; exact enumeration capped at {max}")]
    TooLarge { sites: usize, max: usize },
    #[error("beta = {beta} exceeds the conditioning guard {max} for exact solves")]
    BetaGuard { beta: f64, max: f64 },
    #[error("conjugate gradient stalled: residual {residual:.3e} after {iters} iterations")]
    NoConvergence { residual: f64, iters: usize },
    #[error("vertex {0} out of range")]
    BadVertex(u32),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Edges below this conductance are rejected at assembly.
pub const CONDUCTANCE_FLOOR: f64 = 1e-300;

/// A finite graph with positive edge conductances, optional integer energy
/// labels per vertex, and optional vertex weights nu.
#[derive(Debug, Clone, Default)]
pub struct WeightedGraph {
    n: usize,
    edges: BTreeMap<(u32, u32), f64>,
    energies: Option<Vec<Energy>>,
    weights: Option<Vec<f64>>,
}

impl WeightedGraph {
    pub fn new(n: usize) -> Self {
        WeightedGraph { n, ..Default::default() }
    }

    pub fn set_energies(&mut self, energies: Vec<Energy>) {
        assert_eq!(energies.len(), self.n);
        self.energies = Some(energies);
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) {
        assert_eq!(weights.len(), self.n);
        self.weights = Some(weights);
    }

    pub fn n_verts(&self) -> usize {
        self.n
    }

    pub fn energies(&self) -> Option<&[Energy]> {
        self.energies.as_deref()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Adds conductance on an undirected edge, accumulating parallel calls.
    pub fn add_edge(&mut self, u: u32, v: u32, c: f64) -> Result<(), PotentialError> {
        if u as usize >= self.n || v as usize >= self.n || u == v {
            return Err(PotentialError::BadVertex(u.max(v)));
        }
        if !(c >= CONDUCTANCE_FLOOR) {
            return Err(PotentialError::ConductanceFloor { u, v, c });
        }
        *self.edges.entry((u.min(v), u.max(v))).or_insert(0.0) += c;
        Ok(())
    }

    pub fn conductance(&self, u: u32, v: u32) -> Option<f64> {
        self.edges.get(&(u.min(v), u.max(v))).copied()
    }

    /// Undirected edges in canonical (low, high) order.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.edges.iter().map(|(&(a, b), &c)| (a, b, c))
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    fn adjacency(&self) -> Vec<Vec<(u32, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for (&(a, b), &c) in &self.edges {
            adj[a as usize].push((b, c));
            adj[b as usize].push((a, c));
        }
        adj
    }

    fn check_connected(&self) -> Result<(), PotentialError> {
        if self.n == 0 {
            return Ok(());
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0u32];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(w, _) in &adj[v as usize] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    stack.push(w);
                }
            }
        }
        match seen.iter().position(|&s| !s) {
            Some(v) => Err(PotentialError::Disconnected(v as u32)),
            None => Ok(()),
        }
    }
}

/// Unnormalized Dirichlet form: sum over edges of conductance times the
/// squared difference of f.
pub fn dirichlet_form(g: &WeightedGraph, f: &[f64]) -> f64 {
    g.edges().map(|(a, b, c)| c * (f[a as usize] - f[b as usize]).powi(2)).sum()
}

/// An antisymmetric edge function, stored on canonical orientations.
#[derive(Debug, Clone, Default)]
pub struct Flow {
    vals: BTreeMap<(u32, u32), f64>,
}

impl Flow {
    pub fn zero() -> Self {
        Flow::default()
    }

    /// Sets phi(u -> v); the reverse direction is implied by antisymmetry.
    pub fn set(&mut self, u: u32, v: u32, val: f64) {
        assert_ne!(u, v);
        let (key, signed) = if u < v { ((u, v), val) } else { ((v, u), -val) };
        if signed == 0.0 {
            self.vals.remove(&key);
        } else {
            self.vals.insert(key, signed);
        }
    }

    pub fn add(&mut self, u: u32, v: u32, val: f64) {
        let cur = self.get(u, v);
        self.set(u, v, cur + val);
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        if u < v {
            self.vals.get(&(u, v)).copied().unwrap_or(0.0)
        } else {
            -self.vals.get(&(v, u)).copied().unwrap_or(0.0)
        }
    }

    /// Support entries as (u, v, phi(u -> v)) with u < v.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.vals.iter().map(|(&(a, b), &v)| (a, b, v))
    }

    pub fn is_zero(&self) -> bool {
        self.vals.is_empty()
    }

    /// The gradient flow of a vertex function: conductance times drop of f.
    pub fn from_function(g: &WeightedGraph, f: &[f64]) -> Flow {
        let mut flow = Flow::zero();
        for (a, b, c) in g.edges() {
            let v = c * (f[a as usize] - f[b as usize]);
            if v != 0.0 {
                flow.set(a, b, v);
            }
        }
        flow
    }

    /// Flow norm squared: sum of phi(e)^2 / conductance(e).
    pub fn norm_sq(&self, g: &WeightedGraph) -> Result<f64, PotentialError> {
        let mut total = 0.0;
        for (a, b, v) in self.entries() {
            match g.conductance(a, b) {
                Some(c) => total += v * v / c,
                None => return Err(PotentialError::IncompatibleSupport(a, b)),
            }
        }
        Ok(total)
    }

    /// Inner product sum of phi(e) psi(e) / conductance(e).
    pub fn inner(&self, other: &Flow, g: &WeightedGraph) -> Result<f64, PotentialError> {
        let mut total = 0.0;
        for (a, b, v) in self.entries() {
            match g.conductance(a, b) {
                Some(c) => total += v * other.get(a, b) / c,
                None => return Err(PotentialError::IncompatibleSupport(a, b)),
            }
        }
        Ok(total)
    }

    /// Net outflow at every vertex; sums to zero by antisymmetry.
    pub fn divergence_all(&self, n: usize) -> Vec<f64> {
        let mut div = vec![0.0; n];
        for (a, b, v) in self.entries() {
            div[a as usize] += v;
            div[b as usize] -= v;
        }
        div
    }

    pub fn divergence(&self, v: u32) -> f64 {
        let mut d = 0.0;
        for (a, b, val) in self.entries() {
            if a == v {
                d += val;
            } else if b == v {
                d -= val;
            }
        }
        d
    }
}

/// Equilibrium potential and capacity between disjoint vertex sets.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    /// h = 1 on A, 0 on B, harmonic elsewhere.
    pub h: Vec<f64>,
    /// Dirichlet form of h.
    pub cap: f64,
    /// Capacity read off the fully reduced network, as a cross-check.
    pub cap_reduced: f64,
}

/// Solves for the equilibrium potential by star-mesh elimination.
///
/// Interior vertices are eliminated in order of decreasing energy label
/// (minimum current degree within a level); without labels the order is pure
/// minimum degree. Eliminating in decreasing energy keeps the surviving
/// conductances of a metastable landscape at comparable magnitudes, which is
/// what makes double precision usable at large beta.
pub fn solve_equilibrium(
    g: &WeightedGraph,
    a: &[u32],
    b: &[u32],
) -> Result<Equilibrium, PotentialError> {
    if a.is_empty() || b.is_empty() {
        return Err(PotentialError::BadBoundary("A and B must be non-empty".into()));
    }
    let n = g.n_verts();
    let mut role = vec![0u8; n]; // 0 interior, 1 in A, 2 in B
    for &v in a {
        if v as usize >= n {
            return Err(PotentialError::BadVertex(v));
        }
        role[v as usize] = 1;
    }
    for &v in b {
        if v as usize >= n {
            return Err(PotentialError::BadVertex(v));
        }
        if role[v as usize] == 1 {
            return Err(PotentialError::BadBoundary(format!("vertex {v} in both A and B")));
        }
        role[v as usize] = 2;
    }
    g.check_connected()?;

    // Working adjacency; mesh edges accumulate here.
    let mut adj: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); n];
    for (u, v, c) in g.edges() {
        adj[u as usize].insert(v, c);
        adj[v as usize].insert(u, c);
    }

    // Interior vertices grouped by descending energy label.
    let interior: Vec<u32> =
        (0..n as u32).filter(|&v| role[v as usize] == 0).collect();
    let levels: Vec<Vec<u32>> = match g.energies() {
        Some(en) => {
            let mut groups: BTreeMap<Energy, Vec<u32>> = BTreeMap::new();
            for &v in &interior {
                groups.entry(en[v as usize]).or_default().push(v);
            }
            groups.into_values().rev().collect()
        }
        None => vec![interior],
    };

    // Elimination records for back-substitution.
    let mut order: Vec<(u32, Vec<(u32, f64)>)> = Vec::new();
    for mut level in levels {
        while !level.is_empty() {
            let (pos, &v) = level
                .iter()
                .enumerate()
                .min_by_key(|&(_, &v)| (adj[v as usize].len(), v))
                .unwrap();
            level.swap_remove(pos);
            let star: Vec<(u32, f64)> =
                adj[v as usize].iter().map(|(&w, &c)| (w, c)).collect();
            let total: f64 = star.iter().map(|&(_, c)| c).sum();
            for &(w, _) in &star {
                adj[w as usize].remove(&v);
            }
            adj[v as usize].clear();
            for i in 0..star.len() {
                for j in i + 1..star.len() {
                    let (wi, ci) = star[i];
                    let (wj, cj) = star[j];
                    let mesh = ci * cj / total;
                    *adj[wi as usize].entry(wj).or_insert(0.0) += mesh;
                    *adj[wj as usize].entry(wi).or_insert(0.0) += mesh;
                }
            }
            order.push((v, star));
        }
    }

    // Only boundary vertices remain; capacity is the A-B cut conductance.
    let mut cap_reduced = 0.0;
    for &va in a {
        for (&w, &c) in &adj[va as usize] {
            if role[w as usize] == 2 {
                cap_reduced += c;
            }
        }
    }

    // Back-substitute: each eliminated vertex is the conductance-weighted
    // average of its star, whose members were all eliminated later.
    let mut h = vec![0.0; n];
    for &v in a {
        h[v as usize] = 1.0;
    }
    for (v, star) in order.iter().rev() {
        let total: f64 = star.iter().map(|&(_, c)| c).sum();
        let num: f64 = star.iter().map(|&(w, c)| c * h[w as usize]).sum();
        h[*v as usize] = num / total;
    }

    let cap = dirichlet_form(g, &h);
    Ok(Equilibrium { h, cap, cap_reduced })
}

/// Thomson quotient: (sum of h times divergence of psi)^2 over the norm
/// squared of psi. Equals the capacity when psi is the gradient flow of the
/// exact equilibrium potential, and never exceeds it.
pub fn thomson_value(
    g: &WeightedGraph,
    psi: &Flow,
    h: &[f64],
) -> Result<f64, PotentialError> {
    if psi.is_zero() {
        return Err(PotentialError::ZeroFlow);
    }
    let norm = psi.norm_sq(g)?;
    let div = psi.divergence_all(g.n_verts());
    let pair: f64 = h.iter().zip(&div).map(|(hv, dv)| hv * dv).sum();
    Ok(pair * pair / norm)
}

/// Maximum number of sites for full state-space enumeration.
pub const TINY_MAX_SITES: usize = 12;
/// Conditioning guard for the exact solver.
pub const TINY_MAX_BETA: f64 = 4.0;

const CG_TOL: f64 = 1e-12;
const CG_MAX_ITERS: usize = 200_000;

/// Exact potential theory on a full tiny state space (3^sites states).
///
/// States are indexed by their base-3 code; linear systems are solved
/// matrix-free by Jacobi-preconditioned conjugate gradients with a verified
/// residual.
pub struct TinyExact {
    pub lat: Lattice,
    pub beta: f64,
    /// Exact partition function, by direct summation.
    pub z_beta: f64,
    energy: Vec<Energy>,
    /// nu(sigma) = e^(-beta H).
    weight: Vec<f64>,
}

fn state_index(cfg: &SpinConfig, sites: usize) -> usize {
    let mut idx = 0usize;
    for s in (0..sites).rev() {
        idx = idx * 3 + cfg.code(s) as usize;
    }
    idx
}

fn state_config(mut idx: usize, sites: usize) -> SpinConfig {
    let mut cfg = SpinConfig::constant(sites, -1).expect("site count already validated");
    for s in 0..sites {
        cfg.set_code(s, (idx % 3) as u8);
        idx /= 3;
    }
    cfg
}

/// Index of the state reached by recoding one site.
fn step_index(idx: usize, site: usize, code: u8, new_code: u8) -> usize {
    let pow = 3isize.pow(site as u32);
    (idx as isize + (new_code as isize - code as isize) * pow) as usize
}

impl TinyExact {
    pub fn new(lat: &Lattice, beta: f64) -> Result<TinyExact, PotentialError> {
        let sites = lat.n_sites();
        if sites > TINY_MAX_SITES {
            return Err(PotentialError::TooLarge { sites, max: TINY_MAX_SITES });
        }
        if !(0.0..=TINY_MAX_BETA).contains(&beta) {
            return Err(PotentialError::BetaGuard { beta, max: TINY_MAX_BETA });
        }
        let n = 3usize.pow(sites as u32);
        let mut energy = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        let mut z_beta = 0.0;
        for idx in 0..n {
            let cfg = state_config(idx, sites);
            let e = hamiltonian(lat, &cfg);
            let w = (-beta * e as f64).exp();
            energy.push(e);
            weight.push(w);
            z_beta += w;
        }
        Ok(TinyExact { lat: lat.clone(), beta, z_beta, energy, weight })
    }

    pub fn n_states(&self) -> usize {
        self.energy.len()
    }

    pub fn index_of(&self, cfg: &SpinConfig) -> usize {
        state_index(cfg, self.lat.n_sites())
    }

    pub fn config_of(&self, idx: usize) -> SpinConfig {
        state_config(idx, self.lat.n_sites())
    }

    pub fn energy_of(&self, idx: usize) -> Energy {
        self.energy[idx]
    }

    /// Edge conductance between states differing by one site flip:
    /// e^(-beta max(H, H')).
    fn edge_weight(&self, idx: usize, jdx: usize) -> f64 {
        let e = self.energy[idx].max(self.energy[jdx]);
        (-self.beta * e as f64).exp()
    }

    /// Applies the Dirichlet Laplacian restricted to free states:
    /// (Lx)(s) = sum over neighbors of w(s,t) (x(s) - x(t)), with x = 0 on
    /// clamped states.
    fn apply_laplacian(&self, x: &[f64], free: &[bool], out: &mut [f64]) {
        let sites = self.lat.n_sites();
        out.iter_mut().for_each(|v| *v = 0.0);
        for idx in 0..self.n_states() {
            if !free[idx] {
                continue;
            }
            let cfg = self.config_of(idx);
            let mut acc = 0.0;
            for site in 0..sites {
                let code = cfg.code(site);
                for new_code in 0..3u8 {
                    if new_code == code {
                        continue;
                    }
                    let jdx = step_index(idx, site, code, new_code);
                    let w = self.edge_weight(idx, jdx);
                    acc += w * x[idx];
                    if free[jdx] {
                        acc -= w * x[jdx];
                    }
                }
            }
            out[idx] = acc;
        }
    }

    fn jacobi_diag(&self, free: &[bool]) -> Vec<f64> {
        let sites = self.lat.n_sites();
        let mut d = vec![1.0; self.n_states()];
        for idx in 0..self.n_states() {
            if !free[idx] {
                continue;
            }
            let cfg = self.config_of(idx);
            let mut acc = 0.0;
            for site in 0..sites {
                let code = cfg.code(site);
                for new_code in 0..3u8 {
                    if new_code != code {
                        let jdx = step_index(idx, site, code, new_code);
                        acc += self.edge_weight(idx, jdx);
                    }
                }
            }
            d[idx] = acc;
        }
        d
    }

    /// Jacobi-preconditioned CG for L x = rhs on the free states.
    fn cg_solve(&self, rhs: &[f64], free: &[bool]) -> Result<Vec<f64>, PotentialError> {
        let n = self.n_states();
        let diag = self.jacobi_diag(free);
        let mut x = vec![0.0; n];
        let mut r: Vec<f64> = rhs.iter().zip(free).map(|(&v, &f)| if f { v } else { 0.0 }).collect();
        let rhs_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rhs_norm == 0.0 {
            return Ok(x);
        }
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(&rv, &dv)| rv / dv).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        for iter in 0..CG_MAX_ITERS {
            self.apply_laplacian(&p, free, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm <= CG_TOL * rhs_norm {
                return Ok(x);
            }
            if iter == CG_MAX_ITERS - 1 {
                return Err(PotentialError::NoConvergence {
                    residual: rnorm / rhs_norm,
                    iters: CG_MAX_ITERS,
                });
            }
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        unreachable!()
    }

    fn mark(&self, sets: &[&[SpinConfig]]) -> Result<Vec<bool>, PotentialError> {
        let mut m = vec![false; self.n_states()];
        for set in sets {
            if set.is_empty() {
                return Err(PotentialError::BadBoundary("empty boundary set".into()));
            }
            for cfg in *set {
                m[self.index_of(cfg)] = true;
            }
        }
        Ok(m)
    }

    /// Equilibrium potential h: 1 on A, 0 on B, harmonic elsewhere; one value
    /// per state.
    pub fn equilibrium_potential(
        &self,
        a: &[SpinConfig],
        b: &[SpinConfig],
    ) -> Result<Vec<f64>, PotentialError> {
        let in_a = self.mark(&[a])?;
        let in_b = self.mark(&[b])?;
        if in_a.iter().zip(&in_b).any(|(&x, &y)| x && y) {
            return Err(PotentialError::BadBoundary("A and B intersect".into()));
        }
        let sites = self.lat.n_sites();
        let free: Vec<bool> = (0..self.n_states()).map(|i| !in_a[i] && !in_b[i]).collect();
        // rhs(s) = sum of w(s, t) over neighbors t in A.
        let mut rhs = vec![0.0; self.n_states()];
        for idx in 0..self.n_states() {
            if !free[idx] {
                continue;
            }
            let cfg = self.config_of(idx);
            for site in 0..sites {
                let code = cfg.code(site);
                for new_code in 0..3u8 {
                    if new_code == code {
                        continue;
                    }
                    let jdx = step_index(idx, site, code, new_code);
                    if in_a[jdx] {
                        rhs[idx] += self.edge_weight(idx, jdx);
                    }
                }
            }
        }
        let mut h = self.cg_solve(&rhs, &free)?;
        for idx in 0..self.n_states() {
            if in_a[idx] {
                h[idx] = 1.0;
            }
        }
        Ok(h)
    }

    /// Unnormalized capacity: Dirichlet form of the equilibrium potential.
    pub fn capacity(
        &self,
        a: &[SpinConfig],
        b: &[SpinConfig],
    ) -> Result<f64, PotentialError> {
        let h = self.equilibrium_potential(a, b)?;
        Ok(self.dirichlet_of(&h))
    }

    /// Dirichlet form over the full single-flip edge set.
    pub fn dirichlet_of(&self, f: &[f64]) -> f64 {
        let sites = self.lat.n_sites();
        let mut total = 0.0;
        for idx in 0..self.n_states() {
            let cfg = self.config_of(idx);
            for site in 0..sites {
                let code = cfg.code(site);
                // Count each edge once: only moves to a larger state index.
                for new_code in code + 1..3 {
                    let jdx = idx + (new_code - code) as usize * 3usize.pow(site as u32);
                    let d = f[idx] - f[jdx];
                    total += self.edge_weight(idx, jdx) * d * d;
                }
            }
        }
        total
    }

    /// Mean hitting time of A from s for the continuous-time chain with
    /// Metropolis rates, by a direct linear solve.
    pub fn mean_hitting_time(
        &self,
        s: &SpinConfig,
        a: &[SpinConfig],
    ) -> Result<f64, PotentialError> {
        let in_a = self.mark(&[a])?;
        let start = self.index_of(s);
        if in_a[start] {
            return Ok(0.0);
        }
        let free: Vec<bool> = in_a.iter().map(|&x| !x).collect();
        // nu(s) E_s[tau] satisfies the symmetric system L m = nu off A.
        let rhs: Vec<f64> = self
            .weight
            .iter()
            .zip(&free)
            .map(|(&w, &f)| if f { w } else { 0.0 })
            .collect();
        let m = self.cg_solve(&rhs, &free)?;
        Ok(m[start])
    }

    /// Mean hitting time via the capacity identity
    /// E_s[tau_A] = (sum of nu h) / cap(s, A); exact for singleton starts.
    pub fn mean_hitting_via_capacity(
        &self,
        s: &SpinConfig,
        a: &[SpinConfig],
    ) -> Result<f64, PotentialError> {
        let h = self.equilibrium_potential(std::slice::from_ref(s), a)?;
        let cap = self.dirichlet_of(&h);
        let mass: f64 = self.weight.iter().zip(&h).map(|(w, hv)| w * hv).sum();
        Ok(mass / cap)
    }

    /// Builds the full state graph as a WeightedGraph (tiny lattices only).
    pub fn as_weighted_graph(&self) -> Result<WeightedGraph, PotentialError> {
        let sites = self.lat.n_sites();
        let mut g = WeightedGraph::new(self.n_states());
        for idx in 0..self.n_states() {
            let cfg = self.config_of(idx);
            for site in 0..sites {
                let code = cfg.code(site);
                for new_code in code + 1..3 {
                    let jdx = idx + (new_code - code) as usize * 3usize.pow(site as u32);
                    g.add_edge(idx as u32, jdx as u32, self.edge_weight(idx, jdx))?;
                }
            }
        }
        g.set_energies(self.energy.clone());
        g.set_weights(self.weight.clone());
        Ok(g)
    }

    pub fn weight_of(&self, idx: usize) -> f64 {
        self.weight[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, ground_states, Boundary};
    use crate::ladder::{build_aux, c_constant};
    use proptest::prelude::*;

    fn path_graph(n: usize) -> WeightedGraph {
        let mut g = WeightedGraph::new(n);
        for i in 0..n - 1 {
            g.add_edge(i as u32, i as u32 + 1, 1.0).unwrap();
        }
        g
    }

    #[test]
    fn dirichlet_basics() {
        let mut g = WeightedGraph::new(2);
        g.add_edge(0, 1, 0.7).unwrap();
        assert_eq!(dirichlet_form(&g, &[1.0, 0.0]), 0.7);
        assert_eq!(dirichlet_form(&g, &[2.5, 2.5]), 0.0);
    }

    #[test]
    fn conductance_floor_rejected() {
        let mut g = WeightedGraph::new(2);
        assert!(matches!(
            g.add_edge(0, 1, 1e-310),
            Err(PotentialError::ConductanceFloor { .. })
        ));
    }

    #[test]
    fn series_resistance() {
        for n in [2usize, 5, 9] {
            let g = path_graph(n);
            let eq = solve_equilibrium(&g, &[0], &[n as u32 - 1]).unwrap();
            let expect = 1.0 / (n as f64 - 1.0);
            assert!((eq.cap - expect).abs() < 1e-14);
            assert!((eq.cap_reduced - expect).abs() < 1e-14);
            // h decreases linearly along the path.
            for i in 0..n {
                assert!((eq.h[i] - (n - 1 - i) as f64 / (n - 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn capacity_is_symmetric_and_matches_ladder() {
        for k in [3usize, 5, 9] {
            let aux = build_aux(k).unwrap();
            let mut g = WeightedGraph::new(aux.n_verts());
            for &(a, b) in &aux.edges {
                g.add_edge(a, b, 1.0).unwrap();
            }
            let targets: Vec<u32> = aux.absorbing.clone();
            let eq = solve_equilibrium(&g, &[aux.origin], &targets).unwrap();
            let rev = solve_equilibrium(&g, &targets, &[aux.origin]).unwrap();
            let c = c_constant(k).unwrap();
            assert!((eq.cap - c).abs() < 1e-10);
            assert!((eq.cap - rev.cap).abs() < 1e-12);
            assert!((eq.cap - eq.cap_reduced).abs() < 1e-12);
        }
    }

    #[test]
    fn elimination_respects_energy_labels() {
        // A 4-vertex chain with a high-energy middle; labeled and unlabeled
        // solves agree (order changes, algebra does not).
        let mut g = path_graph(4);
        let mut g2 = g.clone();
        g2.set_energies(vec![0, 7, 3, 0]);
        let a = solve_equilibrium(&g, &[0], &[3]).unwrap();
        let b = solve_equilibrium(&g2, &[0], &[3]).unwrap();
        for i in 0..4 {
            assert!((a.h[i] - b.h[i]).abs() < 1e-14);
        }
        g.add_edge(0, 3, 0.25).unwrap();
        let eq = solve_equilibrium(&g, &[0], &[3]).unwrap();
        assert!((eq.cap - (0.25 + 1.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn flows_match_dirichlet() {
        let g = path_graph(5);
        let f = [1.0, 0.9, 0.3, 0.2, 0.0];
        let flow = Flow::from_function(&g, &f);
        assert!((flow.norm_sq(&g).unwrap() - dirichlet_form(&g, &f)).abs() < 1e-14);
        let div = flow.divergence_all(5);
        assert!(div.iter().sum::<f64>().abs() < 1e-14);
        assert!((flow.divergence(0) - div[0]).abs() < 1e-15);
        assert!(Flow::zero().norm_sq(&g).unwrap() == 0.0);
    }

    #[test]
    fn flow_support_checked() {
        let g = path_graph(3);
        let mut psi = Flow::zero();
        psi.set(0, 2, 1.0);
        assert!(matches!(psi.norm_sq(&g), Err(PotentialError::IncompatibleSupport(0, 2))));
        assert!(matches!(
            thomson_value(&g, &Flow::zero(), &[1.0, 0.5, 0.0]),
            Err(PotentialError::ZeroFlow)
        ));
    }

    #[test]
    fn thomson_attains_capacity_at_optimizer() {
        let mut g = WeightedGraph::new(4);
        g.add_edge(0, 1, 2.0).unwrap();
        g.add_edge(1, 3, 1.0).unwrap();
        g.add_edge(0, 2, 1.0).unwrap();
        g.add_edge(2, 3, 3.0).unwrap();
        g.add_edge(1, 2, 0.5).unwrap();
        let eq = solve_equilibrium(&g, &[0], &[3]).unwrap();
        let psi = Flow::from_function(&g, &eq.h);
        let t = thomson_value(&g, &psi, &eq.h).unwrap();
        assert!((t - eq.cap).abs() < 1e-12 * eq.cap);
        // Scale invariance.
        let mut scaled = Flow::zero();
        for (a, b, v) in psi.entries() {
            scaled.set(a, b, 17.0 * v);
        }
        let ts = thomson_value(&g, &scaled, &eq.h).unwrap();
        assert!((ts - t).abs() < 1e-12 * t);
        // Any other flow gives a lower value.
        let mut other = Flow::zero();
        other.set(0, 1, 1.0);
        other.set(1, 3, 1.0);
        let to = thomson_value(&g, &other, &eq.h).unwrap();
        assert!(to <= eq.cap + 1e-12);
    }

    #[test]
    fn tiny_exact_guards() {
        let lat = build_lattice(4, 4, Boundary::Open).unwrap();
        assert!(matches!(
            TinyExact::new(&lat, 1.0),
            Err(PotentialError::TooLarge { .. })
        ));
        let lat = build_lattice(3, 3, Boundary::Open).unwrap();
        assert!(matches!(
            TinyExact::new(&lat, 7.0),
            Err(PotentialError::BetaGuard { .. })
        ));
    }

    #[test]
    fn tiny_exact_partition_function() {
        // Z - 3 decays like e^(-2 beta). The cheapest excitations are the 16
        // single corner flips (4 each from the -1/+1 seas, 8 from the 0 sea);
        // at energy 3 sit 16 edge-site flips, 32 corner dominoes, and 16 full
        // boundary strips (one row or column of the adjacent phase).
        let lat = build_lattice(3, 3, Boundary::Open).unwrap();
        let te = TinyExact::new(&lat, 2.0).unwrap();
        let count = |e: Energy| (0..te.n_states()).filter(|&i| te.energy_of(i) == e).count();
        assert_eq!(count(0), 3);
        assert_eq!(count(1), 0);
        assert_eq!(count(2), 16);
        assert_eq!(count(3), 64);
        let excess = |beta: f64| TinyExact::new(&lat, beta).unwrap().z_beta - 3.0;
        for beta in [2.0, 3.0, 4.0] {
            let e = excess(beta);
            assert!(e > 0.0 && e < 30.0 * (-2.0 * beta).exp(), "Z({beta}) - 3 = {e}");
        }
        // The decay rate itself: one unit of beta shrinks the excess by
        // e^-2 up to subleading corrections.
        let ratio = excess(4.0) / excess(3.0);
        let target = (-2.0f64).exp();
        assert!(ratio > 0.8 * target && ratio < target, "decay ratio {ratio}");
    }

    #[test]
    fn tiny_exact_symmetry_and_identities() {
        let lat = build_lattice(3, 3, Boundary::Open).unwrap();
        let te = TinyExact::new(&lat, 1.0).unwrap();
        let [minus, zero, plus] = ground_states(&lat);
        // Spin-flip symmetry pins the potential at the zero ground state.
        let h = te
            .equilibrium_potential(std::slice::from_ref(&minus), std::slice::from_ref(&plus))
            .unwrap();
        assert!((h[te.index_of(&zero)] - 0.5).abs() < 1e-9);
        // Capacity is symmetric.
        let cab = te.capacity(std::slice::from_ref(&minus), std::slice::from_ref(&zero)).unwrap();
        let cba = te.capacity(std::slice::from_ref(&zero), std::slice::from_ref(&minus)).unwrap();
        assert!((cab - cba).abs() < 1e-10 * cab);
        // The two mean hitting routes agree.
        let t1 = te.mean_hitting_time(&minus, std::slice::from_ref(&zero)).unwrap();
        let t2 = te.mean_hitting_via_capacity(&minus, std::slice::from_ref(&zero)).unwrap();
        assert!((t1 - t2).abs() < 1e-8 * t1, "direct {t1} vs identity {t2}");
        // Thomson at the optimizer on the full state graph.
        let g = te.as_weighted_graph().unwrap();
        let psi = Flow::from_function(&g, &h);
        let t = thomson_value(&g, &psi, &h).unwrap();
        let cap = te.capacity(std::slice::from_ref(&minus), std::slice::from_ref(&plus)).unwrap();
        assert!((t - cap).abs() < 1e-9 * cap);
    }

    /// Reference solve of the same boundary problem by dense elimination.
    fn dense_reference(g: &WeightedGraph, a: &[u32], b: &[u32]) -> Vec<f64> {
        let n = g.n_verts();
        let mut fixed = vec![None::<f64>; n];
        for &v in a {
            fixed[v as usize] = Some(1.0);
        }
        for &v in b {
            fixed[v as usize] = Some(0.0);
        }
        let free: Vec<usize> = (0..n).filter(|&v| fixed[v].is_none()).collect();
        let pos: std::collections::HashMap<usize, usize> =
            free.iter().enumerate().map(|(p, &v)| (v, p)).collect();
        let m = free.len();
        let mut mat = vec![vec![0.0; m + 1]; m];
        for (u, v, c) in g.edges() {
            for (x, y) in [(u as usize, v as usize), (v as usize, u as usize)] {
                if let Some(&px) = pos.get(&x) {
                    mat[px][px] += c;
                    match fixed[y] {
                        None => mat[px][pos[&y]] -= c,
                        Some(val) => mat[px][m] += c * val,
                    }
                }
            }
        }
        for col in 0..m {
            let piv = (col..m).max_by(|&x, &y| {
                mat[x][col].abs().partial_cmp(&mat[y][col].abs()).unwrap()
            }).unwrap();
            mat.swap(col, piv);
            for row in 0..m {
                if row != col && mat[row][col] != 0.0 {
                    let f = mat[row][col] / mat[col][col];
                    for c2 in col..=m {
                        let v = mat[col][c2];
                        mat[row][c2] -= f * v;
                    }
                }
            }
        }
        let mut h = vec![0.0; n];
        for v in 0..n {
            h[v] = match fixed[v] {
                Some(val) => val,
                None => mat[pos[&v]][m] / mat[pos[&v]][pos[&v]],
            };
        }
        h
    }

    #[test]
    fn star_mesh_matches_dense_on_state_graph() {
        // Restricted low-energy subgraph of the 3x3 state space: compare the
        // elimination solver against dense Gauss-Jordan.
        let lat = build_lattice(3, 3, Boundary::Open).unwrap();
        let te = TinyExact::new(&lat, 1.5).unwrap();
        let [minus, zero, _] = ground_states(&lat);
        // Keep states reachable from the ground states below energy 5,
        // exploring over the single-flip graph.
        let mut keep: Vec<usize> = Vec::new();
        let mut seen = vec![false; te.n_states()];
        let mut stack = vec![te.index_of(&minus), te.index_of(&zero)];
        for &s in &stack {
            seen[s] = true;
        }
        while let Some(idx) = stack.pop() {
            keep.push(idx);
            let cfg = te.config_of(idx);
            for site in 0..9 {
                let code = cfg.code(site);
                for nc in 0..3u8 {
                    if nc == code {
                        continue;
                    }
                    let jdx = step_index(idx, site, code, nc);
                    if !seen[jdx] && te.energy_of(jdx) <= 5 {
                        seen[jdx] = true;
                        stack.push(jdx);
                    }
                }
            }
        }
        keep.sort_unstable();
        let back: std::collections::HashMap<usize, u32> =
            keep.iter().enumerate().map(|(p, &s)| (s, p as u32)).collect();
        let mut g = WeightedGraph::new(keep.len());
        let mut energies = Vec::with_capacity(keep.len());
        for (p, &idx) in keep.iter().enumerate() {
            energies.push(te.energy_of(idx));
            let cfg = te.config_of(idx);
            for site in 0..9 {
                let code = cfg.code(site);
                for nc in code + 1..3 {
                    let jdx = step_index(idx, site, code, nc);
                    if let Some(&q) = back.get(&jdx) {
                        g.add_edge(p as u32, q, te.edge_weight(idx, jdx)).unwrap();
                    }
                }
            }
        }
        g.set_energies(energies);
        let a = vec![back[&te.index_of(&minus)]];
        let b = vec![back[&te.index_of(&zero)]];
        let eq = solve_equilibrium(&g, &a, &b).unwrap();
        let href = dense_reference(&g, &a, &b);
        let max_diff = eq
            .h
            .iter()
            .zip(&href)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "solver deviation {max_diff} on {} states", keep.len());
        assert!((eq.cap - dirichlet_form(&g, &href)).abs() < 1e-10 * eq.cap);
        assert!((eq.cap - eq.cap_reduced).abs() < 1e-10 * eq.cap);
    }

    proptest! {
        #[test]
        fn gradient_flow_norm_equals_dirichlet(
            vals in proptest::collection::vec(-1.0f64..1.0, 6),
            extra in proptest::collection::vec((0u32..6, 0u32..6, 0.1f64..2.0), 0..8),
        ) {
            let mut g = path_graph(6);
            for (u, v, c) in extra {
                if u != v {
                    g.add_edge(u, v, c).unwrap();
                }
            }
            let flow = Flow::from_function(&g, &vals);
            let d = dirichlet_form(&g, &vals);
            prop_assert!((flow.norm_sq(&g).unwrap() - d).abs() <= 1e-12 * (1.0 + d));
            let div = flow.divergence_all(6);
            prop_assert!(div.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn dirichlet_principle_sandwich(
            mid in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let g = path_graph(6);
            let eq = solve_equilibrium(&g, &[0], &[5]).unwrap();
            let mut f = vec![1.0];
            f.extend(&mid);
            f.push(0.0);
            prop_assert!(dirichlet_form(&g, &f) >= eq.cap - 1e-12);
        }
    }
}
