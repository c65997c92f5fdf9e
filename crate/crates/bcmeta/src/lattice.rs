//! Spin configurations on a finite K x L box and their energies.
//!
//! Sites are addressed as (col, row) with col in 1..=K and row in 1..=L;
//! internally a site is the flat index `(row-1)*K + (col-1)`. Spins take
//! values -1, 0, +1 and a configuration packs one 2-bit code per site
//! (0, 1, 2 for -1, 0, +1), so configurations up to 256 sites are plain
//! `Copy` values usable as hash keys.
//!
//! All energies are exact integers: every bond contributes
//! (sigma(x) - sigma(y))^2 in {0, 1, 4}.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Exact integer energy of a configuration or energy difference.
pub type Energy = i64;

/// Maximum number of sites a packed configuration can hold.
pub const MAX_SITES: usize = 256;

const NO_NEIGHBOR: u16 = u16::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatticeError {
    #[error("lattice must have K >= 3, L >= 3 and K*L <= {MAX_SITES}, got {k} x {l}")]
    BadDimensions { k: usize, l: usize },
    #[error("spin value {0} is not one of -1, 0, +1")]
    BadSpin(i8),
    #[error("site index {site} out of range for {n} sites")]
    BadSite { site: usize, n: usize },
    #[error("transpose requires a square lattice, got {k} x {l}")]
    TransposeNonSquare { k: usize, l: usize },
    #[error("config parse error: {0}")]
    Parse(String),
}

/// Boundary condition of the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    /// Missing bonds at the box boundary.
    Open,
    /// Toroidal wrap-around in both directions.
    Periodic,
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Boundary::Open => write!(f, "open"),
            Boundary::Periodic => write!(f, "periodic"),
        }
    }
}

/// A K x L box with precomputed neighbor tables. The short side is always K:
/// wider-than-tall inputs are transposed on construction.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub k: usize,
    pub l: usize,
    pub boundary: Boundary,
    /// True when the constructor swapped the input dimensions.
    pub transposed_input: bool,
    /// True when 5 <= K <= L, the regime all asymptotic constants assume.
    pub paper_regime: bool,
    /// Up to four neighbor site indices per site; `u16::MAX` marks a missing
    /// neighbor at an open boundary. Order: left, right, down, up.
    neighbors: Vec<[u16; 4]>,
}

/// Builds the lattice and its neighbor tables.
pub fn build_lattice(k: usize, l: usize, boundary: Boundary) -> Result<Lattice, LatticeError> {
    if k < 3 || l < 3 || k * l > MAX_SITES {
        return Err(LatticeError::BadDimensions { k, l });
    }
    let transposed_input = k > l;
    let (k, l) = if transposed_input { (l, k) } else { (k, l) };
    let idx = |c: usize, r: usize| (r * k + c) as u16;
    let mut neighbors = Vec::with_capacity(k * l);
    for r in 0..l {
        for c in 0..k {
            let mut nb = [NO_NEIGHBOR; 4];
            match boundary {
                Boundary::Open => {
                    if c > 0 {
                        nb[0] = idx(c - 1, r);
                    }
                    if c + 1 < k {
                        nb[1] = idx(c + 1, r);
                    }
                    if r > 0 {
                        nb[2] = idx(c, r - 1);
                    }
                    if r + 1 < l {
                        nb[3] = idx(c, r + 1);
                    }
                }
                Boundary::Periodic => {
                    nb[0] = idx((c + k - 1) % k, r);
                    nb[1] = idx((c + 1) % k, r);
                    nb[2] = idx(c, (r + l - 1) % l);
                    nb[3] = idx(c, (r + 1) % l);
                }
            }
            neighbors.push(nb);
        }
    }
    Ok(Lattice { k, l, boundary, transposed_input, paper_regime: k >= 5, neighbors })
}

impl Lattice {
    pub fn n_sites(&self) -> usize {
        self.k * self.l
    }

    /// Flat site index of (col, row), both 1-based.
    pub fn site(&self, col: usize, row: usize) -> usize {
        debug_assert!(col >= 1 && col <= self.k && row >= 1 && row <= self.l);
        (row - 1) * self.k + (col - 1)
    }

    /// Neighbor site indices of `site` (2 to 4 entries).
    pub fn neighbors(&self, site: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[site].iter().copied().filter(|&n| n != NO_NEIGHBOR).map(|n| n as usize)
    }

    /// Raw neighbor table of `site`: four entries, `u16::MAX` when missing.
    pub fn neighbor_table(&self, site: usize) -> [u16; 4] {
        self.neighbors[site]
    }

    pub fn degree(&self, site: usize) -> usize {
        self.neighbors[site].iter().filter(|&&n| n != NO_NEIGHBOR).count()
    }

    /// Undirected bonds, each listed once as (site, site).
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..self.n_sites() {
            // Right and up cover each bond exactly once.
            for &n in &[self.neighbors[s][1], self.neighbors[s][3]] {
                if n != NO_NEIGHBOR {
                    out.push((s, n as usize));
                }
            }
        }
        out
    }
}

/// Packed three-state configuration, 2 bits per site.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinConfig {
    words: [u64; MAX_SITES / 32],
    n_sites: u16,
}

impl SpinConfig {
    /// The monochromatic configuration with all sites at `spin`.
    pub fn constant(n_sites: usize, spin: i8) -> Result<Self, LatticeError> {
        if n_sites > MAX_SITES {
            return Err(LatticeError::BadDimensions { k: n_sites, l: 1 });
        }
        let code = spin_code(spin)?;
        let mut cfg = SpinConfig { words: [0; MAX_SITES / 32], n_sites: n_sites as u16 };
        if code != 0 {
            for site in 0..n_sites {
                cfg.set_code(site, code);
            }
        }
        Ok(cfg)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites as usize
    }

    #[inline]
    pub fn code(&self, site: usize) -> u8 {
        ((self.words[site >> 5] >> ((site & 31) << 1)) & 0b11) as u8
    }

    #[inline]
    pub fn set_code(&mut self, site: usize, code: u8) {
        debug_assert!(code < 3);
        let w = site >> 5;
        let sh = (site & 31) << 1;
        self.words[w] = (self.words[w] & !(0b11 << sh)) | ((code as u64) << sh);
    }

    #[inline]
    pub fn spin(&self, site: usize) -> i8 {
        self.code(site) as i8 - 1
    }

    #[inline]
    pub fn set_spin(&mut self, site: usize, spin: i8) {
        self.set_code(site, (spin + 1) as u8);
    }

    /// Copy of `self` with one site changed.
    pub fn with_spin(&self, site: usize, spin: i8) -> Self {
        let mut out = *self;
        out.set_spin(site, spin);
        out
    }

    pub fn spins(&self) -> Vec<i8> {
        (0..self.n_sites()).map(|s| self.spin(s)).collect()
    }
}

impl fmt::Debug for SpinConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpinConfig(")?;
        for s in 0..self.n_sites() {
            f.write_str(match self.code(s) {
                0 => "-",
                1 => "0",
                _ => "+",
            })?;
        }
        write!(f, ")")
    }
}

fn spin_code(spin: i8) -> Result<u8, LatticeError> {
    match spin {
        -1 => Ok(0),
        0 => Ok(1),
        1 => Ok(2),
        other => Err(LatticeError::BadSpin(other)),
    }
}

/// Bond energy (a - b)^2 indexed by the two spin codes.
/// Bond energy (s - t)^2 indexed by spin codes.
pub const PAIR_ENERGY: [[Energy; 3]; 3] = [[0, 1, 4], [1, 0, 1], [4, 1, 0]];

/// Total energy: sum of (sigma(x) - sigma(y))^2 over all bonds.
pub fn hamiltonian(lat: &Lattice, cfg: &SpinConfig) -> Energy {
    debug_assert_eq!(cfg.n_sites(), lat.n_sites());
    let mut h = 0;
    for (a, b) in lat.bonds() {
        h += PAIR_ENERGY[cfg.code(a) as usize][cfg.code(b) as usize];
    }
    h
}

/// Energy change of flipping `site` to `new_spin`, from local bonds only.
pub fn delta_energy(lat: &Lattice, cfg: &SpinConfig, site: usize, new_spin: i8) -> Energy {
    let old = cfg.code(site) as usize;
    let new = (new_spin + 1) as usize;
    let mut d = 0;
    for &n in &lat.neighbors[site] {
        if n != NO_NEIGHBOR {
            let nc = cfg.code(n as usize) as usize;
            d += PAIR_ENERGY[new][nc] - PAIR_ENERGY[old][nc];
        }
    }
    d
}

/// All single-site moves in deterministic order: sites ascending, candidate
/// spins in order -1 < 0 < +1 skipping the current one. Always `2 * n_sites`
/// moves.
pub fn enumerate_moves(lat: &Lattice, cfg: &SpinConfig) -> Vec<(usize, i8)> {
    let mut moves = Vec::with_capacity(2 * lat.n_sites());
    for site in 0..lat.n_sites() {
        let cur = cfg.spin(site);
        for spin in [-1i8, 0, 1] {
            if spin != cur {
                moves.push((site, spin));
            }
        }
    }
    moves
}

/// Lattice and spin symmetries of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    /// Swap spins +1 and -1, fix 0.
    SwapPM,
    /// Relabel spins: -1 maps to `a`, 0 maps to `b`, +1 maps to the remaining
    /// third value. On configurations using only spins {-1, 0} this is the
    /// usual two-spin relabeling.
    Relabel(i8, i8),
    /// Reflect across the main diagonal (square lattices only).
    Transpose,
    /// Reflect columns: col maps to K+1-col.
    HFlip,
    /// Reflect rows: row maps to L+1-row.
    VFlip,
}

/// Applies a symmetry operation to a configuration.
pub fn apply_symmetry(
    lat: &Lattice,
    cfg: &SpinConfig,
    sym: Symmetry,
) -> Result<SpinConfig, LatticeError> {
    let n = lat.n_sites();
    debug_assert_eq!(cfg.n_sites(), n);
    match sym {
        Symmetry::SwapPM => apply_symmetry(lat, cfg, Symmetry::Relabel(1, 0)),
        Symmetry::Relabel(a, b) => {
            let ca = spin_code(a)?;
            let cb = spin_code(b)?;
            if ca == cb {
                return Err(LatticeError::BadSpin(b));
            }
            let cc = 3 - ca - cb;
            let map = [ca, cb, cc];
            let mut out = *cfg;
            for site in 0..n {
                out.set_code(site, map[cfg.code(site) as usize]);
            }
            Ok(out)
        }
        Symmetry::Transpose => {
            if lat.k != lat.l {
                return Err(LatticeError::TransposeNonSquare { k: lat.k, l: lat.l });
            }
            let mut out = *cfg;
            for row in 1..=lat.l {
                for col in 1..=lat.k {
                    out.set_code(lat.site(col, row), cfg.code(lat.site(row, col)));
                }
            }
            Ok(out)
        }
        Symmetry::HFlip => {
            let mut out = *cfg;
            for row in 1..=lat.l {
                for col in 1..=lat.k {
                    out.set_code(lat.site(col, row), cfg.code(lat.site(lat.k + 1 - col, row)));
                }
            }
            Ok(out)
        }
        Symmetry::VFlip => {
            let mut out = *cfg;
            for row in 1..=lat.l {
                for col in 1..=lat.k {
                    out.set_code(lat.site(col, row), cfg.code(lat.site(col, lat.l + 1 - row)));
                }
            }
            Ok(out)
        }
    }
}

/// The three ground states **-1**, **0**, **+1** in spin order.
pub fn ground_states(lat: &Lattice) -> [SpinConfig; 3] {
    let n = lat.n_sites();
    [
        SpinConfig::constant(n, -1).unwrap(),
        SpinConfig::constant(n, 0).unwrap(),
        SpinConfig::constant(n, 1).unwrap(),
    ]
}

/// Parses the text form: rows from row 1 upward separated by '/', each a
/// string over {'-', '0', '+'} of length K.
pub fn parse_config(lat: &Lattice, text: &str) -> Result<SpinConfig, LatticeError> {
    let rows: Vec<&str> = text.split('/').collect();
    if rows.len() != lat.l {
        return Err(LatticeError::Parse(format!(
            "expected {} rows separated by '/', got {}",
            lat.l,
            rows.len()
        )));
    }
    let mut cfg = SpinConfig::constant(lat.n_sites(), -1).unwrap();
    for (r, row) in rows.iter().enumerate() {
        let chars: Vec<char> = row.chars().collect();
        if chars.len() != lat.k {
            return Err(LatticeError::Parse(format!(
                "row {} has {} characters, expected {}",
                r + 1,
                chars.len(),
                lat.k
            )));
        }
        for (c, ch) in chars.iter().enumerate() {
            let code = match ch {
                '-' => 0,
                '0' => 1,
                '+' => 2,
                other => {
                    return Err(LatticeError::Parse(format!("bad spin character {other:?}")));
                }
            };
            cfg.set_code(lat.site(c + 1, r + 1), code);
        }
    }
    Ok(cfg)
}

/// Inverse of [`parse_config`].
pub fn format_config(lat: &Lattice, cfg: &SpinConfig) -> String {
    let mut out = String::with_capacity(lat.n_sites() + lat.l);
    for row in 1..=lat.l {
        if row > 1 {
            out.push('/');
        }
        for col in 1..=lat.k {
            out.push(match cfg.code(lat.site(col, row)) {
                0 => '-',
                1 => '0',
                _ => '+',
            });
        }
    }
    out
}
