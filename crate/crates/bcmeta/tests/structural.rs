//! Set-level structure of the low-energy landscape: decomposition of
//! barrier-level neighborhoods, intersections between edge and bulk typical
//! sets, ladder family multiplicities, exact energy profiles of the
//! constructed configuration families, and incremental-energy consistency.

use std::collections::HashSet;

use bcmeta::canonical::{
    bulk_sets, canonical_path, gamma_barrier, protuberance_set, regular_set, PathChoices,
};
use bcmeta::edge::{build_edge_graph, edge_typical, gateway_sets, ladder_map};
use bcmeta::explore::{cutoff_component, ExploreLimits};
use bcmeta::lattice::{build_lattice, delta_energy, ground_states, hamiltonian};
use bcmeta::{Boundary, Energy, Lattice, SpinConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn limits() -> ExploreLimits {
    ExploreLimits { max_states: 2_000_000, max_edges: 20_000_000 }
}

fn open(k: usize, l: usize) -> Lattice {
    build_lattice(k, l, Boundary::Open).unwrap()
}

fn mono(lat: &Lattice, a: i8) -> SpinConfig {
    let [minus, zero, plus] = ground_states(lat);
    match a {
        -1 => minus,
        0 => zero,
        _ => plus,
    }
}

/// Everything connected to `seeds` through paths that stay at or below the
/// barrier level and avoid `forbidden`.
fn nhat(lat: &Lattice, seeds: &[SpinConfig], forbidden: &[SpinConfig]) -> HashSet<SpinConfig> {
    let graph = cutoff_component(lat, seeds, gamma_barrier(lat), forbidden, &limits()).unwrap();
    assert!(!graph.truncated, "exploration budget must not truncate these instances");
    graph.verts.into_iter().collect()
}

fn set(v: Vec<SpinConfig>) -> HashSet<SpinConfig> {
    v.into_iter().collect()
}

/// The barrier-level neighborhood of a union splits into the neighborhoods
/// of the parts, each avoiding the other (and any common forbidden set).
#[test]
fn neighborhood_of_union_splits_by_forbidding_the_other_part() {
    for lat in [open(5, 6), open(5, 5)] {
        let [minus, zero, plus] = ground_states(&lat);

        for extra in [vec![], vec![plus]] {
            let lhs = nhat(&lat, &[minus, zero], &extra);
            let mut avoid_minus = extra.clone();
            avoid_minus.push(minus);
            let mut avoid_zero = extra.clone();
            avoid_zero.push(zero);
            let rhs: HashSet<SpinConfig> = nhat(&lat, &[zero], &avoid_minus)
                .union(&nhat(&lat, &[minus], &avoid_zero))
                .cloned()
                .collect();
            assert_eq!(lhs, rhs, "split of the two-well neighborhood failed on {}x{}", lat.k, lat.l);
        }

        let lhs = nhat(&lat, &[minus, plus], &[]);
        let rhs: HashSet<SpinConfig> = nhat(&lat, &[plus], &[minus])
            .union(&nhat(&lat, &[minus], &[plus]))
            .cloned()
            .collect();
        assert_eq!(lhs, rhs, "split of the outer-well neighborhood failed on {}x{}", lat.k, lat.l);
    }
}

/// The three edge typical sets are pairwise disjoint; their intersections
/// with the bulk families are exactly the two-row and (L-2)-row regular
/// configurations; edge sets do not meet the bulk of the far pair.
#[test]
fn edge_and_bulk_typical_sets_intersect_exactly_in_border_rows() {
    for lat in [open(5, 6), open(5, 5)] {
        let l = lat.l;
        let edge_minus = set(edge_typical(&lat, -1, &limits()).unwrap().graph.verts);
        let edge_zero = set(edge_typical(&lat, 0, &limits()).unwrap().graph.verts);
        let edge_plus = set(edge_typical(&lat, 1, &limits()).unwrap().graph.verts);

        assert!(edge_minus.is_disjoint(&edge_zero));
        assert!(edge_minus.is_disjoint(&edge_plus));
        assert!(edge_zero.is_disjoint(&edge_plus));

        let bulk_m0 = set(bulk_sets(&lat, (-1, 0)).unwrap().0);
        let bulk_0p = set(bulk_sets(&lat, (0, 1)).unwrap().0);
        let regular = |pair, v| set(regular_set(&lat, pair, v).unwrap());

        assert_eq!(&edge_minus & &bulk_m0, regular((-1, 0), 2));
        assert_eq!(&edge_zero & &bulk_m0, regular((-1, 0), l - 2));
        assert_eq!(&edge_plus & &bulk_0p, regular((0, 1), l - 2));
        assert_eq!(&edge_zero & &bulk_0p, regular((0, 1), 2));

        assert!((&edge_minus & &bulk_0p).is_empty());
        assert!((&edge_plus & &bulk_m0).is_empty());
    }
}

/// The five constructed pieces (two bulk families, three edge sets) exactly
/// cover the barrier-level neighborhood of the three ground states.
#[test]
fn typical_pieces_cover_the_ground_state_neighborhood_exactly() {
    for lat in [open(5, 6), open(5, 5)] {
        let grounds = ground_states(&lat);
        let full = nhat(&lat, &grounds, &[]);

        let mut pieces: HashSet<SpinConfig> = HashSet::new();
        pieces.extend(bulk_sets(&lat, (-1, 0)).unwrap().0);
        pieces.extend(bulk_sets(&lat, (0, 1)).unwrap().0);
        for a in [-1i8, 0, 1] {
            pieces.extend(edge_typical(&lat, a, &limits()).unwrap().graph.verts);
        }

        assert_eq!(
            full,
            pieces,
            "typical pieces must tile the reachable set exactly on {}x{}",
            lat.k,
            lat.l
        );
    }
}

/// Each good pair maps onto the truncated ladder with four symmetric
/// families on a proper rectangle and eight on a square (transposes).
#[test]
fn ladder_families_count_four_on_rectangles_and_eight_on_squares() {
    let lat = open(5, 6);
    for (a, pairs) in [(-1i8, &[(-1i8, 0i8)][..]), (0, &[(0, -1), (0, 1)]), (1, &[(1, 0)])] {
        let graph = build_edge_graph(&lat, a, &limits()).unwrap();
        for &pair in pairs {
            let gs = gateway_sets(&lat, pair, &limits()).unwrap();
            let lm = ladder_map(&lat, pair, &graph, &gs).unwrap();
            assert_eq!(lm.families.len(), 4, "pair {pair:?} on 5x6");
        }
    }

    let sq = open(5, 5);
    for (a, pair) in [(-1i8, (-1i8, 0i8)), (0, (0, 1))] {
        let graph = build_edge_graph(&sq, a, &limits()).unwrap();
        let gs = gateway_sets(&sq, pair, &limits()).unwrap();
        let lm = ladder_map(&sq, pair, &graph, &gs).unwrap();
        assert_eq!(lm.families.len(), 8, "pair {pair:?} on 5x5");
    }
}

/// Regular configurations sit one step below the barrier on open boxes and
/// two steps below on tori; protuberances sit exactly at the barrier.
#[test]
fn interface_families_have_exact_energy_levels() {
    let cases =
        [(5, 6, Boundary::Open), (5, 5, Boundary::Open), (5, 6, Boundary::Periodic)];
    for (k, l, boundary) in cases {
        let lat = build_lattice(k, l, boundary).unwrap();
        let gamma = gamma_barrier(&lat);
        let regular_level = match boundary {
            Boundary::Open => gamma - 1,
            Boundary::Periodic => gamma - 2,
        };
        for pair in [(-1i8, 0i8), (0, 1)] {
            for v in 1..=l - 1 {
                for cfg in regular_set(&lat, pair, v).unwrap() {
                    assert_eq!(hamiltonian(&lat, &cfg), regular_level);
                }
            }
            for v in 1..=l - 2 {
                for cfg in protuberance_set(&lat, pair, v).unwrap() {
                    assert_eq!(hamiltonian(&lat, &cfg), gamma);
                }
            }
        }
    }
}

/// Canonical paths walk from one ground state to the other in KL single-site
/// flips and peak exactly at the barrier level.
#[test]
fn canonical_paths_are_single_flip_chains_peaking_at_the_barrier() {
    let lats = [
        open(5, 6),
        open(5, 5),
        build_lattice(5, 6, Boundary::Periodic).unwrap(),
    ];
    for lat in lats {
        for (a, b) in [(-1i8, 0i8), (0, 1)] {
            let path = canonical_path(&lat, a, b, &PathChoices::bottom_left(lat.l)).unwrap();
            assert_eq!(path.len(), lat.k * lat.l + 1);
            assert_eq!(path[0], mono(&lat, a));
            assert_eq!(path[path.len() - 1], mono(&lat, b));

            for w in path.windows(2) {
                let flips =
                    (0..w[0].n_sites()).filter(|&s| w[0].spin(s) != w[1].spin(s)).count();
                assert_eq!(flips, 1, "consecutive path entries must differ at one site");
            }
            let peak = path.iter().map(|c| hamiltonian(&lat, c)).max().unwrap();
            assert_eq!(peak, gamma_barrier(&lat));
        }
    }
}

/// Single-site energy increments agree with recomputing the full energy,
/// across boundaries and shapes, on ten thousand random moves.
#[test]
fn incremental_energy_matches_full_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_260_815);
    let cases =
        [(5, 6, Boundary::Open), (5, 5, Boundary::Periodic), (4, 7, Boundary::Open)];
    for (k, l, boundary) in cases {
        let lat = build_lattice(k, l, boundary).unwrap();
        let n = lat.n_sites();
        for _ in 0..3_400 {
            let mut cfg = SpinConfig::constant(n, -1).unwrap();
            for s in 0..n {
                cfg.set_spin(s, rng.gen_range(-1i8..=1));
            }
            let site = rng.gen_range(0..n);
            let new_spin = rng.gen_range(-1i8..=1);
            let dh: Energy = delta_energy(&lat, &cfg, site, new_spin);
            let full = hamiltonian(&lat, &cfg.with_spin(site, new_spin)) - hamiltonian(&lat, &cfg);
            assert_eq!(dh, full);
        }
    }
}
