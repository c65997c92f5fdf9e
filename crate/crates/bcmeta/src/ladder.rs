//! The truncated-ladder auxiliary random walk and the prefactor constants.
//!
//! The walk lives on the vertex set
//! `{(col, row) : 0 <= row <= min(col, 2) <= K} \ {(K, 2)}` with unit rates
//! on unit lattice steps; it is absorbed on the set `col == K or row == 2`.
//! The absorption probability of the walk started next to the origin yields
//! the constant `c_K = h(0,0) - h(1,0)` (the origin has degree one), which
//! enters the edge part of the Eyring-Kramers prefactor.
//!
//! Two independent routes compute the equilibrium potential: a dense linear
//! solve on the graph Laplacian and a closed form built from the roots of
//! t^4 - 7t^3 + 13t^2 - 7t + 1. Their agreement is asserted in tests.

use crate::lattice::Energy;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LadderError {
    #[error("ladder width must satisfy {min} <= K <= {max}, got {k}")]
    BadWidth { k: usize, min: usize, max: usize },
    #[error("model constants require 2 <= K <= L and L >= 5, got {k} x {l}")]
    BadDimensions { k: usize, l: usize },
    #[error(
        "periodic edge constant is not derivable from the bulk ladder construction; \
         only the bulk term is available for periodic boundaries"
    )]
    Unsupported,
    #[error("linear solve failed: {0}")]
    Singular(String),
}

/// Largest ladder width before the closed-form powers overflow f64.
pub const MAX_LADDER_WIDTH: usize = 400;

/// The full ladder graph with its absorbing boundary.
#[derive(Debug, Clone)]
pub struct AuxGraph {
    pub k: usize,
    /// Vertices as (col, row), in column-major deterministic order.
    pub verts: Vec<(u16, u16)>,
    index: HashMap<(u16, u16), u32>,
    /// Unit-rate edges, each listed once.
    pub edges: Vec<(u32, u32)>,
    /// Absorbing vertices: col == K or row == 2.
    pub absorbing: Vec<u32>,
    /// Vertex (0, 0).
    pub origin: u32,
}

impl AuxGraph {
    pub fn vertex(&self, col: usize, row: usize) -> Option<u32> {
        self.index.get(&(col as u16, row as u16)).copied()
    }

    pub fn n_verts(&self) -> usize {
        self.verts.len()
    }
}

/// Builds the ladder graph for width `k >= 3`.
pub fn build_aux(k: usize) -> Result<AuxGraph, LadderError> {
    if !(3..=MAX_LADDER_WIDTH).contains(&k) {
        return Err(LadderError::BadWidth { k, min: 3, max: MAX_LADDER_WIDTH });
    }
    let mut verts = Vec::new();
    let mut index = HashMap::new();
    for col in 0..=k {
        for row in 0..=col.min(2) {
            if (col, row) == (k, 2) {
                continue;
            }
            index.insert((col as u16, row as u16), verts.len() as u32);
            verts.push((col as u16, row as u16));
        }
    }
    let mut edges = Vec::new();
    for (i, &(c, r)) in verts.iter().enumerate() {
        // Right and up neighbors cover each edge once.
        for (nc, nr) in [(c + 1, r), (c, r + 1)] {
            if let Some(&j) = index.get(&(nc, nr)) {
                edges.push((i as u32, j));
            }
        }
    }
    let absorbing: Vec<u32> = verts
        .iter()
        .enumerate()
        .filter(|&(_, &(c, r))| c as usize == k || r == 2)
        .map(|(i, _)| i as u32)
        .collect();
    let origin = index[&(0, 0)];
    Ok(AuxGraph { k, verts, index, edges, absorbing, origin })
}

/// Dense Gaussian elimination with partial pivoting; solves `m x = rhs`.
fn dense_solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Result<Vec<f64>, LadderError> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col].abs() < 1e-300 {
            return Err(LadderError::Singular(format!("zero pivot at column {col}")));
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for c in col..n {
                    let v = m[col][c];
                    m[row][c] -= f * v;
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut v = rhs[row];
        for c in row + 1..n {
            v -= m[row][c] * x[c];
        }
        x[row] = v / m[row][row];
    }
    Ok(x)
}

/// Equilibrium potential `h(x) = P_x[hit origin before the absorbing set]`
/// by a dense Laplacian solve; returns one value per vertex.
pub fn solve_potential_linear(g: &AuxGraph) -> Result<Vec<f64>, LadderError> {
    let n = g.n_verts();
    let mut boundary = vec![None::<f64>; n];
    boundary[g.origin as usize] = Some(1.0);
    for &a in &g.absorbing {
        boundary[a as usize] = Some(0.0);
    }
    let free: Vec<usize> = (0..n).filter(|&v| boundary[v].is_none()).collect();
    let pos: HashMap<usize, usize> = free.iter().enumerate().map(|(p, &v)| (v, p)).collect();
    let m = free.len();
    let mut mat = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for &(a, b) in &g.edges {
        for (u, v) in [(a as usize, b as usize), (b as usize, a as usize)] {
            if let Some(&pu) = pos.get(&u) {
                mat[pu][pu] += 1.0;
                match boundary[v] {
                    None => mat[pu][pos[&v]] -= 1.0,
                    Some(val) => rhs[pu] += val,
                }
            }
        }
    }
    let x = dense_solve(mat, rhs)?;
    let mut h = vec![0.0; n];
    for v in 0..n {
        h[v] = match boundary[v] {
            Some(val) => val,
            None => x[pos[&v]],
        };
    }
    Ok(h)
}

/// Closed-form equilibrium potential along the two ladder rows.
///
/// `a[i]` is the potential at (K-i, 0) for i in 0..=K and `b[i]` the
/// potential at (K-i, 1) for i in 0..K.
#[derive(Debug, Clone)]
pub struct ClosedFormPotential {
    pub k: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Solves the harmonic recurrences in closed form via the quartic roots.
pub fn solve_potential_closed_form(k: usize) -> Result<ClosedFormPotential, LadderError> {
    if !(3..=MAX_LADDER_WIDTH).contains(&k) {
        return Err(LadderError::BadWidth { k, min: 3, max: MAX_LADDER_WIDTH });
    }
    let sqrt5 = 5.0f64.sqrt();
    // Quartic t^4 - 7t^3 + 13t^2 - 7t + 1 = 0, i.e. t + 1/t = (7 +- sqrt5)/2.
    let s1 = (7.0 + sqrt5) / 2.0;
    let s2 = (7.0 - sqrt5) / 2.0;
    let alpha = |s: f64| ((s + (s * s - 4.0).sqrt()) / 2.0, (s - (s * s - 4.0).sqrt()) / 2.0);
    let (a1, a2) = alpha(s1);
    let (a3, a4) = alpha(s2);
    let gap = |p: f64, q: f64, i: usize| p.powi(i as i32) - q.powi(i as i32);
    let big = |i: usize| gap(a1, a2, i);
    let small = |i: usize| gap(a3, a4, i);
    // Mode coefficients on the b-row: a pure mode alpha^i on the a-row
    // carries (3 - s) alpha^i on the b-row.
    let c1 = -(1.0 + sqrt5) / 2.0; // 3 - s1
    let c3 = (-1.0 + sqrt5) / 2.0; // 3 - s2
    // Boundary equations at columns 1 and 2 pin the two free coefficients:
    //   2 b_{K-1} = b_{K-2} + a_{K-1}
    //   3 a_{K-1} = 1 + a_{K-2} + b_{K-1}
    // Scale the unknowns by the largest power gap so every entry stays O(1).
    let rb = big(k - 2) / big(k - 1);
    let rs = small(k - 2) / small(k - 1);
    let m11 = (2.0 + sqrt5) - (1.0 + sqrt5) / 2.0 * rb;
    let m12 = (2.0 - sqrt5) - (1.0 - sqrt5) / 2.0 * rs;
    let m21 = (7.0 + sqrt5) / 2.0 - rb;
    let m22 = (7.0 - sqrt5) / 2.0 - rs;
    let det = m11 * m22 - m12 * m21;
    if !det.is_finite() || det == 0.0 {
        return Err(LadderError::Singular("closed-form 2x2 system degenerate".into()));
    }
    let p1s = -m12 / det;
    let p3s = m11 / det;
    let mode = |i: usize| (p1s * big(i) / big(k - 1), p3s * small(i) / small(k - 1));
    let mut a: Vec<f64> = (0..k)
        .map(|i| {
            let (u, v) = mode(i);
            u + v
        })
        .collect();
    a.push(1.0); // boundary value at the origin column
    let b: Vec<f64> = (0..k)
        .map(|i| {
            let (u, v) = mode(i);
            c1 * u + c3 * v
        })
        .collect();
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(LadderError::Singular("closed-form potentials overflowed".into()));
    }
    Ok(ClosedFormPotential { k, a, b })
}

/// The limiting constant `lim c_K` = 1 - lim a_{K-1}.
pub const C_LIMIT: f64 = 0.4350146376;

/// The absorption constant `c_K = 1 - a_{K-1}` from the closed form.
pub fn c_constant(k: usize) -> Result<f64, LadderError> {
    let cf = solve_potential_closed_form(k)?;
    Ok(1.0 - cf.a[k - 1])
}

/// The ladder graph with the absorbing set collapsed to a single vertex.
#[derive(Debug, Clone)]
pub struct ProjectedAux {
    pub k: usize,
    /// Interior vertices as (col, row), then the collapsed vertex last.
    pub verts: Vec<(u16, u16)>,
    index: HashMap<(u16, u16), u32>,
    /// Edges with aggregated integer rates.
    pub edges: Vec<(u32, u32, u32)>,
    pub origin: u32,
    /// Index of the collapsed absorbing vertex.
    pub dagger: u32,
}

impl ProjectedAux {
    /// Index of interior vertex (col, row), if present.
    pub fn vertex(&self, col: usize, row: usize) -> Option<u32> {
        let i = self.index.get(&(col as u16, row as u16)).copied();
        i.filter(|&v| v != self.dagger)
    }

    pub fn n_verts(&self) -> usize {
        self.verts.len() + 1
    }
}

/// Collapses the absorbing set of the ladder into one vertex, summing rates.
pub fn project_aux(g: &AuxGraph) -> ProjectedAux {
    let absorbing: Vec<bool> = {
        let mut f = vec![false; g.n_verts()];
        for &a in &g.absorbing {
            f[a as usize] = true;
        }
        f
    };
    let mut verts = Vec::new();
    let mut index = HashMap::new();
    for (i, &(c, r)) in g.verts.iter().enumerate() {
        if !absorbing[i] {
            index.insert((c, r), verts.len() as u32);
            verts.push((c, r));
        }
    }
    let dagger = verts.len() as u32;
    let mut rates: HashMap<(u32, u32), u32> = HashMap::new();
    for &(a, b) in &g.edges {
        let (ca, cb) = (g.verts[a as usize], g.verts[b as usize]);
        let ia = if absorbing[a as usize] { dagger } else { index[&ca] };
        let ib = if absorbing[b as usize] { dagger } else { index[&cb] };
        if ia == dagger && ib == dagger {
            continue;
        }
        let key = (ia.min(ib), ia.max(ib));
        *rates.entry(key).or_insert(0) += 1;
    }
    let mut edges: Vec<(u32, u32, u32)> = rates.into_iter().map(|((a, b), r)| (a, b, r)).collect();
    edges.sort_unstable();
    let origin = index[&g.verts[g.origin as usize]];
    ProjectedAux { k: g.k, verts, index, edges, origin, dagger }
}

/// Equilibrium potential `P_x[hit origin before the collapsed vertex]` on the
/// projected graph; one value per vertex including the collapsed one (0).
pub fn solve_projected_potential(p: &ProjectedAux) -> Result<Vec<f64>, LadderError> {
    let n = p.n_verts();
    let mut boundary = vec![None::<f64>; n];
    boundary[p.origin as usize] = Some(1.0);
    boundary[p.dagger as usize] = Some(0.0);
    let free: Vec<usize> = (0..n).filter(|&v| boundary[v].is_none()).collect();
    let pos: HashMap<usize, usize> = free.iter().enumerate().map(|(q, &v)| (v, q)).collect();
    let m = free.len();
    let mut mat = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for &(a, b, r) in &p.edges {
        for (u, v) in [(a as usize, b as usize), (b as usize, a as usize)] {
            if let Some(&pu) = pos.get(&u) {
                mat[pu][pu] += r as f64;
                match boundary[v] {
                    None => mat[pu][pos[&v]] -= r as f64,
                    Some(val) => rhs[pu] += r as f64 * val,
                }
            }
        }
    }
    let x = dense_solve(mat, rhs)?;
    let mut h = vec![0.0; n];
    for v in 0..n {
        h[v] = match boundary[v] {
            Some(val) => val,
            None => x[pos[&v]],
        };
    }
    Ok(h)
}

/// `sum over edges of rate * (h(u) - h(v))^2`, the unnormalized Dirichlet
/// energy; for the equilibrium potential this equals `|V| * capacity`.
pub fn dirichlet_energy_hat(g: &AuxGraph, h: &[f64]) -> f64 {
    g.edges.iter().map(|&(a, b)| (h[a as usize] - h[b as usize]).powi(2)).sum()
}

/// Same on the projected graph, weighting each edge by its aggregated rate.
pub fn dirichlet_energy_projected(p: &ProjectedAux, h: &[f64]) -> f64 {
    p.edges
        .iter()
        .map(|&(a, b, r)| r as f64 * (h[a as usize] - h[b as usize]).powi(2))
        .sum()
}

/// Prefactor constants of the mean transition time `kappa * e^(beta Gamma)`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelConstants {
    pub k: usize,
    pub l: usize,
    /// Absorption constant of the width-K ladder walk.
    pub c_k: f64,
    /// Bulk term: K(L-4)/4, halved again on square lattices.
    pub bulk: f64,
    /// Edge term: 1/(4 c_K), halved again on square lattices.
    pub edge: f64,
    /// kappa = bulk + 2 * edge.
    pub kappa: f64,
    /// Bulk term for periodic boundaries, per unit area.
    pub bulk_periodic: f64,
}

impl ModelConstants {
    /// Energy barrier between ground states for the given boundary.
    pub fn gamma(&self, boundary: crate::lattice::Boundary) -> Energy {
        match boundary {
            crate::lattice::Boundary::Open => self.k as Energy + 1,
            crate::lattice::Boundary::Periodic => 2 * self.k as Energy + 2,
        }
    }

    /// The full periodic prefactor needs an edge constant this construction
    /// does not provide; always an error.
    pub fn kappa_periodic(&self) -> Result<f64, LadderError> {
        Err(LadderError::Unsupported)
    }
}

/// Computes the prefactor constants for a K x L box, K <= L.
pub fn model_constants(k: usize, l: usize) -> Result<ModelConstants, LadderError> {
    if k > l || l < 5 || k < 3 {
        return Err(LadderError::BadDimensions { k, l });
    }
    let c_k = c_constant(k)?;
    // Square lattices double every interface family by transposition.
    let denom = if k == l { 8.0 } else { 4.0 };
    let bulk = k as f64 * (l as f64 - 4.0) / denom;
    let edge = 1.0 / (denom * c_k);
    let bulk_periodic = (k as f64 + 2.0) * (l as f64 - 4.0) / (denom * (k * l) as f64);
    Ok(ModelConstants { k, l, c_k, bulk, edge, kappa: bulk + 2.0 * edge, bulk_periodic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_shape() {
        let g = build_aux(5).unwrap();
        assert_eq!(g.n_verts(), 14); // 3K - 1
        assert_eq!(g.absorbing.len(), 5); // (K,0), (K,1), (2..K,2)
        // The origin touches only (1,0).
        let deg: Vec<usize> = (0..g.n_verts())
            .map(|v| {
                g.edges.iter().filter(|&&(a, b)| a as usize == v || b as usize == v).count()
            })
            .collect();
        assert_eq!(deg[g.origin as usize], 1);
        assert_eq!(deg[g.vertex(1, 1).unwrap() as usize], 2);
        assert_eq!(deg[g.vertex(3, 1).unwrap() as usize], 4);
        assert_eq!(deg[g.vertex(2, 2).unwrap() as usize], 2);
    }

    #[test]
    fn closed_form_satisfies_recurrences() {
        for k in [3, 5, 8, 20, 40] {
            let cf = solve_potential_closed_form(k).unwrap();
            assert!(cf.a[0].abs() < 1e-12 && cf.b[0].abs() < 1e-12);
            assert_eq!(cf.a[k], 1.0);
            for i in 1..k {
                let r = 3.0 * cf.a[i] - cf.a[i + 1] - cf.a[i - 1] - cf.b[i];
                assert!(r.abs() < 1e-11, "a-recurrence residual {r} at i={i}, K={k}");
            }
            for i in 1..k - 1 {
                let r = 4.0 * cf.b[i] - cf.b[i + 1] - cf.b[i - 1] - cf.a[i];
                assert!(r.abs() < 1e-11, "b-recurrence residual {r} at i={i}, K={k}");
            }
            let r = 2.0 * cf.b[k - 1] - cf.b[k - 2] - cf.a[k - 1];
            assert!(r.abs() < 1e-11, "corner residual {r} at K={k}");
        }
    }

    #[test]
    fn linear_and_closed_form_agree() {
        for k in [3, 5, 7, 12, 25, 40] {
            let g = build_aux(k).unwrap();
            let h = solve_potential_linear(&g).unwrap();
            let cf = solve_potential_closed_form(k).unwrap();
            for i in 0..=k {
                let v = h[g.vertex(k - i, 0).unwrap() as usize];
                assert!((v - cf.a[i]).abs() < 1e-10, "a[{i}] mismatch at K={k}");
            }
            for i in 0..k {
                let v = h[g.vertex(k - i, 1).unwrap() as usize];
                assert!((v - cf.b[i]).abs() < 1e-10, "b[{i}] mismatch at K={k}");
            }
        }
    }

    #[test]
    fn capacity_identities() {
        for k in [3, 5, 11, 40] {
            let g = build_aux(k).unwrap();
            let h = solve_potential_linear(&g).unwrap();
            let c = c_constant(k).unwrap();
            // Flux out of the degree-one origin equals the Dirichlet energy.
            let flux = h[g.origin as usize] - h[g.vertex(1, 0).unwrap() as usize];
            assert!((flux - c).abs() < 1e-10);
            assert!((dirichlet_energy_hat(&g, &h) - c).abs() < 1e-10);
            // The projection onto the collapsed graph preserves it.
            let p = project_aux(&g);
            let hp = solve_projected_potential(&p).unwrap();
            assert!((dirichlet_energy_projected(&p, &hp) - c).abs() < 1e-10);
            // And the projected potential agrees with the full one pointwise.
            for (i, &(col, row)) in p.verts.iter().enumerate() {
                let full = h[g.vertex(col as usize, row as usize).unwrap() as usize];
                assert!((hp[i] - full).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projected_rates_aggregate() {
        let g = build_aux(5).unwrap();
        let p = project_aux(&g);
        assert_eq!(p.verts.len(), 2 * 5 - 1); // |V_K| = 2K including dagger
        // Column K-1 row 1 touches two absorbing vertices.
        let x = p.vertex(4, 1).unwrap();
        let rate: u32 = p
            .edges
            .iter()
            .filter(|&&(a, b, _)| (a == x && b == p.dagger) || (b == x && a == p.dagger))
            .map(|&(_, _, r)| r)
            .sum();
        assert_eq!(rate, 2);
    }

    #[test]
    fn limit_constant() {
        let c200 = c_constant(200).unwrap();
        assert!((c200 - C_LIMIT).abs() < 1e-4, "c_200 = {c200}");
        let c400 = c_constant(400).unwrap();
        assert!(c400.is_finite() && (c400 - C_LIMIT).abs() < 1e-6);
    }

    #[test]
    fn constants_match_hand_values() {
        let mc = model_constants(5, 6).unwrap();
        assert_eq!(mc.bulk, 2.5);
        assert!((mc.kappa - (2.5 + 2.0 * mc.edge)).abs() < 1e-15);
        let sq = model_constants(5, 5).unwrap();
        assert_eq!(sq.bulk, 0.625);
        assert!(sq.edge > 0.0 && sq.edge < 1.0);
        assert!(model_constants(6, 5).is_err());
        assert!(mc.kappa_periodic().is_err());
        assert_eq!(mc.gamma(crate::lattice::Boundary::Open), 6);
        assert_eq!(mc.gamma(crate::lattice::Boundary::Periodic), 12);
    }
}
