//! Canonical configurations and paths between ground states.
//!
//! A canonical configuration between the phases a and b consists of a block
//! of b-spins filling whole rows from one horizontal edge of the box, plus
//! an optional protuberance growing along the next row from one corner. A
//! canonical path fills the box site by site through these shapes, reaching
//! maximal energy Gamma on the intermediate protuberances; this family
//! realizes the energy barrier between ground states.

use crate::lattice::{
    apply_symmetry, hamiltonian, Boundary, Energy, Lattice, LatticeError, SpinConfig, Symmetry,
};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CanonicalError {
    #[error(
        "({a},{b}) is not a good pair: a direct interface between the -1 and +1 phases \
         has energy 4*Gamma-4, far above the barrier Gamma, so transitions route \
         through the zero phase"
    )]
    BadPair { a: i8, b: i8 },
    #[error("row count v={v} or protuberance length h={h} out of range for {k}x{l}")]
    BadBounds { v: usize, h: usize, k: usize, l: usize },
    #[error("transposed configurations require a square lattice")]
    NotSquare,
    #[error("need one corner choice per row: got {got}, need {need}")]
    BadChoices { got: usize, need: usize },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Which horizontal edge the b-block grows from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthSide {
    Bottom,
    Top,
}

/// Which corner of the growth row the protuberance is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corner {
    Left,
    Right,
}

/// Pairs of phases connected by canonical structures.
pub const GOOD_PAIRS: [(i8, i8); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

pub fn is_good_pair(a: i8, b: i8) -> bool {
    GOOD_PAIRS.contains(&(a, b))
}

/// A single canonical configuration, before construction on a lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanonicalSpec {
    /// Ordered good pair (a, b): a fills the box, b grows into it.
    pub pair: (i8, i8),
    /// Number of complete b-rows.
    pub v: usize,
    /// Protuberance length in the next row; 0 for none.
    pub h: usize,
    pub side: GrowthSide,
    pub corner: Corner,
    /// Reflect across the diagonal; square lattices only.
    pub transposed: bool,
}

impl CanonicalSpec {
    pub fn regular(pair: (i8, i8), v: usize, side: GrowthSide) -> Self {
        CanonicalSpec { pair, v, h: 0, side, corner: Corner::Left, transposed: false }
    }

    pub fn protuberance(
        pair: (i8, i8),
        v: usize,
        h: usize,
        side: GrowthSide,
        corner: Corner,
    ) -> Self {
        CanonicalSpec { pair, v, h, side, corner, transposed: false }
    }

    pub fn transposed(mut self, t: bool) -> Self {
        self.transposed = t;
        self
    }
}

/// Builds the configuration described by a spec on the given lattice.
pub fn make_config(lat: &Lattice, spec: &CanonicalSpec) -> Result<SpinConfig, CanonicalError> {
    let (a, b) = spec.pair;
    if !is_good_pair(a, b) {
        return Err(CanonicalError::BadPair { a, b });
    }
    let (k, l) = (lat.k, lat.l);
    let bounds_ok = if spec.h == 0 {
        spec.v <= l
    } else {
        spec.v <= l - 1 && spec.h <= k
    };
    if !bounds_ok {
        return Err(CanonicalError::BadBounds { v: spec.v, h: spec.h, k, l });
    }
    if spec.transposed && k != l {
        return Err(CanonicalError::NotSquare);
    }
    let mut cfg = SpinConfig::constant(lat.n_sites(), a)?;
    // Complete rows counted from the growth edge.
    let block_rows: Box<dyn Iterator<Item = usize>> = match spec.side {
        GrowthSide::Bottom => Box::new(1..=spec.v),
        GrowthSide::Top => Box::new(l - spec.v + 1..=l),
    };
    for row in block_rows {
        for col in 1..=k {
            cfg.set_spin(lat.site(col, row), b);
        }
    }
    if spec.h > 0 {
        let row = match spec.side {
            GrowthSide::Bottom => spec.v + 1,
            GrowthSide::Top => l - spec.v,
        };
        let cols: std::ops::RangeInclusive<usize> = match spec.corner {
            Corner::Left => 1..=spec.h,
            Corner::Right => k - spec.h + 1..=k,
        };
        for col in cols {
            cfg.set_spin(lat.site(col, row), b);
        }
    }
    if spec.transposed {
        cfg = apply_symmetry(lat, &cfg, Symmetry::Transpose)?;
    }
    Ok(cfg)
}

fn collect_variants(
    lat: &Lattice,
    specs: impl IntoIterator<Item = CanonicalSpec>,
) -> Result<Vec<SpinConfig>, CanonicalError> {
    let mut set = BTreeSet::new();
    for spec in specs {
        set.insert(make_config(lat, &spec)?);
        if lat.k == lat.l {
            set.insert(make_config(lat, &spec.transposed(true))?);
        }
    }
    Ok(set.into_iter().collect())
}

/// The configurations with exactly v complete b-rows (both growth sides,
/// plus transposes on square lattices), deduplicated.
pub fn regular_set(
    lat: &Lattice,
    pair: (i8, i8),
    v: usize,
) -> Result<Vec<SpinConfig>, CanonicalError> {
    let sides = [GrowthSide::Bottom, GrowthSide::Top];
    collect_variants(lat, sides.map(|s| CanonicalSpec::regular(pair, v, s)))
}

/// The configurations with v complete b-rows and a partial protuberance of
/// every length 1..K, both sides and corners, deduplicated.
pub fn protuberance_set(
    lat: &Lattice,
    pair: (i8, i8),
    v: usize,
) -> Result<Vec<SpinConfig>, CanonicalError> {
    let mut specs = Vec::new();
    for h in 1..lat.k {
        for side in [GrowthSide::Bottom, GrowthSide::Top] {
            for corner in [Corner::Left, Corner::Right] {
                specs.push(CanonicalSpec::protuberance(pair, v, h, side, corner));
            }
        }
    }
    collect_variants(lat, specs)
}

/// Per-path choices: growth side is global, the corner is chosen per row.
#[derive(Debug, Clone)]
pub struct PathChoices {
    pub side: GrowthSide,
    /// Corner for each of the L rows, in growth order.
    pub corners: Vec<Corner>,
    pub transposed: bool,
}

impl PathChoices {
    /// The reference fixture: grow from the bottom, always the left corner.
    pub fn bottom_left(l: usize) -> Self {
        PathChoices { side: GrowthSide::Bottom, corners: vec![Corner::Left; l], transposed: false }
    }
}

/// The monotone path from **a** to **b** that fills the box site by site
/// through canonical configurations; KL+1 entries, single-site steps.
pub fn canonical_path(
    lat: &Lattice,
    a: i8,
    b: i8,
    choices: &PathChoices,
) -> Result<Vec<SpinConfig>, CanonicalError> {
    if !is_good_pair(a, b) {
        return Err(CanonicalError::BadPair { a, b });
    }
    if choices.corners.len() != lat.l {
        return Err(CanonicalError::BadChoices { got: choices.corners.len(), need: lat.l });
    }
    let (k, l) = (lat.k, lat.l);
    let mut path = Vec::with_capacity(k * l + 1);
    for n in 0..=k * l {
        let (v, h) = (n / k, n % k);
        let spec = CanonicalSpec {
            pair: (a, b),
            v,
            h,
            side: choices.side,
            corner: if v < l { choices.corners[v] } else { Corner::Left },
            transposed: choices.transposed,
        };
        path.push(make_config(lat, &spec)?);
    }
    Ok(path)
}

/// The bulk typical sets: configurations whose b-block is far from both
/// horizontal edges. Returns (all members, the members with energy Gamma).
/// Empty on lattices too small to have a bulk (L < 5).
pub fn bulk_sets(
    lat: &Lattice,
    pair: (i8, i8),
) -> Result<(Vec<SpinConfig>, Vec<SpinConfig>), CanonicalError> {
    let l = lat.l;
    let mut all = BTreeSet::new();
    if l >= 5 {
        for v in 2..=l - 2 {
            all.extend(regular_set(lat, pair, v)?);
        }
        for v in 2..=l.saturating_sub(3) {
            all.extend(protuberance_set(lat, pair, v)?);
        }
    }
    let gamma = gamma_barrier(lat);
    let at_gamma: Vec<SpinConfig> =
        all.iter().filter(|cfg| hamiltonian(lat, cfg) == gamma).cloned().collect();
    Ok((all.into_iter().collect(), at_gamma))
}

/// The energy barrier between ground states for this lattice.
pub fn gamma_barrier(lat: &Lattice) -> Energy {
    let k = lat.k.min(lat.l) as Energy;
    match lat.boundary {
        Boundary::Open => k + 1,
        Boundary::Periodic => 2 * k + 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, ground_states};

    fn open56() -> Lattice {
        build_lattice(5, 6, Boundary::Open).unwrap()
    }

    #[test]
    fn make_config_endpoints_and_energies() {
        let lat = open56();
        let [minus, zero, _] = ground_states(&lat);
        let start = make_config(&lat, &CanonicalSpec::regular((-1, 0), 0, GrowthSide::Bottom))
            .unwrap();
        assert_eq!(start, minus);
        let end =
            make_config(&lat, &CanonicalSpec::regular((-1, 0), 6, GrowthSide::Top)).unwrap();
        assert_eq!(end, zero);
        let r2 = make_config(&lat, &CanonicalSpec::regular((-1, 0), 2, GrowthSide::Bottom))
            .unwrap();
        assert_eq!(hamiltonian(&lat, &r2), 5);
        let q11 = make_config(
            &lat,
            &CanonicalSpec::protuberance((-1, 0), 1, 1, GrowthSide::Bottom, Corner::Left),
        )
        .unwrap();
        assert_eq!(hamiltonian(&lat, &q11), 6);
        // The protuberance sits at the left corner of row 2.
        assert_eq!(q11.spin(lat.site(1, 2)), 0);
        assert_eq!(q11.spin(lat.site(2, 2)), -1);
    }

    #[test]
    fn rejects_bad_specs() {
        let lat = open56();
        assert_eq!(
            make_config(&lat, &CanonicalSpec::regular((-1, 1), 2, GrowthSide::Bottom)),
            Err(CanonicalError::BadPair { a: -1, b: 1 })
        );
        assert!(make_config(&lat, &CanonicalSpec::regular((-1, 0), 7, GrowthSide::Bottom))
            .is_err());
        assert!(make_config(
            &lat,
            &CanonicalSpec::protuberance((-1, 0), 6, 1, GrowthSide::Bottom, Corner::Left)
        )
        .is_err());
        assert_eq!(
            make_config(
                &lat,
                &CanonicalSpec::regular((-1, 0), 2, GrowthSide::Bottom).transposed(true)
            ),
            Err(CanonicalError::NotSquare)
        );
    }

    #[test]
    fn set_cardinalities() {
        let lat = open56();
        assert_eq!(regular_set(&lat, (-1, 0), 2).unwrap().len(), 2);
        assert_eq!(protuberance_set(&lat, (-1, 0), 2).unwrap().len(), 16);
        let sq = build_lattice(5, 5, Boundary::Open).unwrap();
        assert_eq!(regular_set(&sq, (-1, 0), 2).unwrap().len(), 4);
        assert_eq!(protuberance_set(&sq, (-1, 0), 2).unwrap().len(), 32);
        // Monochrome endpoints collapse to one element.
        assert_eq!(regular_set(&sq, (-1, 0), 0).unwrap().len(), 1);
        assert_eq!(regular_set(&sq, (-1, 0), 5).unwrap().len(), 1);
    }

    #[test]
    fn energy_profile_of_sets() {
        for (k, l) in [(5usize, 6usize), (4, 7)] {
            for boundary in [Boundary::Open, Boundary::Periodic] {
                let lat = build_lattice(k, l, boundary).unwrap();
                let gamma = gamma_barrier(&lat);
                // One interface of length K when open, two on the torus.
                let regular_energy = match boundary {
                    Boundary::Open => k as Energy,
                    Boundary::Periodic => 2 * k as Energy,
                };
                for v in 1..l {
                    for cfg in regular_set(&lat, (-1, 0), v).unwrap() {
                        assert_eq!(hamiltonian(&lat, &cfg), regular_energy);
                    }
                }
                for v in 1..l - 1 {
                    for cfg in protuberance_set(&lat, (-1, 0), v).unwrap() {
                        assert_eq!(hamiltonian(&lat, &cfg), gamma);
                    }
                }
            }
        }
    }

    #[test]
    fn edge_row_protuberance_energies() {
        let lat = open56();
        for h in 1..5 {
            let low = make_config(
                &lat,
                &CanonicalSpec::protuberance((-1, 0), 0, h, GrowthSide::Bottom, Corner::Right),
            )
            .unwrap();
            assert_eq!(hamiltonian(&lat, &low), h as Energy + 1);
            let high = make_config(
                &lat,
                &CanonicalSpec::protuberance((-1, 0), 5, h, GrowthSide::Bottom, Corner::Left),
            )
            .unwrap();
            assert_eq!(hamiltonian(&lat, &high), 5 - h as Energy + 1);
        }
    }

    #[test]
    fn canonical_path_shape() {
        let lat = open56();
        let path = canonical_path(&lat, -1, 0, &PathChoices::bottom_left(6)).unwrap();
        assert_eq!(path.len(), 31);
        let [minus, zero, _] = ground_states(&lat);
        assert_eq!(path[0], minus);
        assert_eq!(path[30], zero);
        let mut max_h = 0;
        for w in path.windows(2) {
            let diff = (0..30).filter(|&s| w[0].spin(s) != w[1].spin(s)).count();
            assert_eq!(diff, 1);
            max_h = max_h.max(hamiltonian(&lat, &w[1]));
        }
        assert_eq!(max_h, 6);
        let per = build_lattice(5, 6, Boundary::Periodic).unwrap();
        let path = canonical_path(&per, -1, 0, &PathChoices::bottom_left(6)).unwrap();
        let max_h = path.iter().map(|c| hamiltonian(&per, c)).max().unwrap();
        assert_eq!(max_h, 12);
    }

    #[test]
    fn path_respects_pair_and_rejects_direct() {
        let lat = open56();
        let path = canonical_path(&lat, 0, 1, &PathChoices::bottom_left(6)).unwrap();
        for cfg in &path {
            assert!((0..30).all(|s| cfg.spin(s) == 0 || cfg.spin(s) == 1));
        }
        assert!(matches!(
            canonical_path(&lat, -1, 1, &PathChoices::bottom_left(6)),
            Err(CanonicalError::BadPair { .. })
        ));
        // Alternating corners still give single-site steps.
        let mut choices = PathChoices::bottom_left(6);
        for (i, c) in choices.corners.iter_mut().enumerate() {
            if i % 2 == 1 {
                *c = Corner::Right;
            }
        }
        let path = canonical_path(&lat, -1, 0, &choices).unwrap();
        for w in path.windows(2) {
            assert_eq!((0..30).filter(|&s| w[0].spin(s) != w[1].spin(s)).count(), 1);
        }
    }

    #[test]
    fn bulk_set_counts_and_symmetry() {
        let lat = open56();
        let (all, at_gamma) = bulk_sets(&lat, (-1, 0)).unwrap();
        assert_eq!(all.len(), 38);
        assert_eq!(at_gamma.len(), 32);
        for cfg in &at_gamma {
            assert_eq!(hamiltonian(&lat, cfg), 6);
        }
        let (swapped, _) = bulk_sets(&lat, (0, -1)).unwrap();
        assert_eq!(all, swapped);
        let (other, _) = bulk_sets(&lat, (0, 1)).unwrap();
        assert!(all.iter().all(|c| !other.contains(c)));
        // Too small to have a bulk.
        let tiny = build_lattice(3, 4, Boundary::Open).unwrap();
        let (empty, empty_gamma) = bulk_sets(&tiny, (-1, 0)).unwrap();
        assert!(empty.is_empty() && empty_gamma.is_empty());
    }

    #[test]
    fn relabel_commutes_with_construction() {
        let lat = open56();
        let base = protuberance_set(&lat, (-1, 0), 2).unwrap();
        let target = protuberance_set(&lat, (0, 1), 2).unwrap();
        let mapped: BTreeSet<SpinConfig> = base
            .iter()
            .map(|c| apply_symmetry(&lat, c, Symmetry::Relabel(0, 1)).unwrap())
            .collect();
        assert_eq!(mapped, target.into_iter().collect());
    }

    #[test]
    fn direct_interface_energy() {
        let lat = open56();
        let gamma = gamma_barrier(&lat);
        for v in 1..6 {
            for cfg in regular_set(&lat, (-1, 0), v).unwrap() {
                let direct = apply_symmetry(&lat, &cfg, Symmetry::Relabel(-1, 1)).unwrap();
                assert_eq!(hamiltonian(&lat, &direct), 4 * gamma - 4);
            }
        }
    }
}
