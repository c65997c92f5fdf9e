//! Rejection-free continuous-time Metropolis simulation.
//!
//! The walker holds in each configuration for an exponential time with rate
//! equal to the total exit rate `R = sum over moves of e^{-beta*[dH]+}`, then
//! jumps to a move drawn proportionally to its rate. Moves are bucketed by
//! the positive part of their energy increment, so drawing a jump and
//! updating after a flip (only the flipped site and its neighbors change
//! class) are both constant-time in the lattice size.
//!
//! Replicas are independent: replica `r` uses stream `r` of a counter-based
//! generator seeded once, so results are reproducible and independent of
//! thread scheduling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::{ground_states, Lattice, SpinConfig};

/// Largest possible positive energy increment of a single flip: four bonds,
/// each changing by at most the full pair-energy range.
const MAX_DH: usize = 16;
/// Class index for moves to the currently occupied spin (rate zero).
const DEAD: u8 = (MAX_DH + 1) as u8;

#[derive(Debug, Error)]
pub enum KmcError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("need at least {need} unflagged samples, have {have}")]
    Insufficient { have: usize, need: usize },
}

/// How reported times are scaled.
///
/// The discrete-time chain attempts one uniformly chosen move per tick and
/// runs `2|sites|` times slower than the continuous-time chain, so reported
/// times are multiplied by exactly that factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TimeConvention {
    Continuous,
    DiscreteScaled,
}

/// A named absorbing set.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub name: String,
    pub members: Vec<SpinConfig>,
}

impl TargetSet {
    pub fn new(name: impl Into<String>, members: Vec<SpinConfig>) -> Self {
        TargetSet { name: name.into(), members }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub lat: Lattice,
    pub beta: f64,
    pub start: SpinConfig,
    pub targets: Vec<TargetSet>,
    pub replicas: usize,
    pub seed: u64,
    pub max_jumps: u64,
    pub max_time: f64,
    pub time_convention: TimeConvention,
}

impl SimulationConfig {
    pub fn new(
        lat: Lattice,
        beta: f64,
        start: SpinConfig,
        targets: Vec<TargetSet>,
        replicas: usize,
        seed: u64,
    ) -> Self {
        SimulationConfig {
            lat,
            beta,
            start,
            targets,
            replicas,
            seed,
            max_jumps: 1_000_000_000_000,
            max_time: f64::INFINITY,
            time_convention: TimeConvention::Continuous,
        }
    }

    fn validate(&self) -> Result<(), KmcError> {
        let bad = |msg: &str| Err(KmcError::BadConfig(msg.to_string()));
        if self.replicas == 0 {
            return bad("replicas must be at least 1");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if self.targets.is_empty() {
            return bad("at least one target set is required");
        }
        if self.max_jumps == 0 || !(self.max_time > 0.0) {
            return bad("caps must allow at least one jump");
        }
        let n = self.lat.n_sites();
        if self.start.n_sites() != n {
            return bad("start configuration does not match the lattice");
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &self.targets {
            if t.members.is_empty() {
                return bad("target sets must be non-empty");
            }
            if !names.insert(t.name.as_str()) {
                return bad("target names must be distinct");
            }
            for m in &t.members {
                if m.n_sites() != n {
                    return bad("target member does not match the lattice");
                }
                if *m == self.start {
                    return bad("targets must exclude the start configuration");
                }
            }
        }
        Ok(())
    }
}

/// One replica's outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionSample {
    /// Hitting time in the configured time convention's units.
    pub hit_time: f64,
    /// Name of the absorbing set entered; absent when the run was capped.
    pub hit_target: Option<String>,
    pub jumps: u64,
    /// Ground states visited, recorded on entering one different from the
    /// last recorded; the start is recorded first if it is a ground state.
    pub ground_sequence: Vec<i8>,
    /// True when a cap stopped the run; capped samples are excluded from
    /// estimators and only counted.
    pub capped: bool,
}

/// What a visited configuration means for the run, if anything.
struct Mark {
    target: Option<u32>,
    ground: Option<i8>,
}

/// Per-site random words for the three spins, XOR-folded into an
/// incrementally maintained configuration key.
fn spin_keys(n: usize) -> Vec<[u64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0F_2AB1E5);
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

fn key_of(keys: &[[u64; 3]], spins: &[i8]) -> u64 {
    spins.iter().zip(keys).fold(0, |k, (&s, row)| k ^ row[(s + 1) as usize])
}

/// The marked configurations in an open-addressed probe table over the
/// incremental configuration key, so the per-jump lookup is one masked load
/// in the common miss case. A key match still compares spins exactly.
struct MarkTable {
    keys: Vec<[u64; 3]>,
    entries: Vec<(u64, Vec<i8>, Mark)>,
    /// Entry index + 1 per slot, zero when empty; length a power of two.
    slots: Vec<u32>,
    mask: u64,
}

impl MarkTable {
    fn new(n_sites: usize) -> MarkTable {
        MarkTable { keys: spin_keys(n_sites), entries: Vec::new(), slots: Vec::new(), mask: 0 }
    }

    fn entry(&mut self, spins: Vec<i8>) -> &mut Mark {
        let key = key_of(&self.keys, &spins);
        let idx = match self.entries.iter().position(|(k, s, _)| *k == key && *s == spins) {
            Some(i) => i,
            None => {
                self.entries.push((key, spins, Mark { target: None, ground: None }));
                self.entries.len() - 1
            }
        };
        &mut self.entries[idx].2
    }

    /// Builds the probe table; must run after the last `entry` call.
    fn finalize(&mut self) {
        let size = (4 * self.entries.len().max(1)).next_power_of_two();
        self.mask = size as u64 - 1;
        self.slots = vec![0; size];
        for (i, (key, _, _)) in self.entries.iter().enumerate() {
            let mut s = (key & self.mask) as usize;
            while self.slots[s] != 0 {
                s = (s + 1) & self.mask as usize;
            }
            self.slots[s] = i as u32 + 1;
        }
    }

    #[inline]
    fn get(&self, key: u64, state: &[i8]) -> Option<&Mark> {
        let mut s = (key & self.mask) as usize;
        loop {
            let e = self.slots[s];
            if e == 0 {
                return None;
            }
            let (k, spins, mark) = &self.entries[e as usize - 1];
            if *k == key && spins.as_slice() == state {
                return Some(mark);
            }
            s = (s + 1) & self.mask as usize;
        }
    }
}

/// Position of the k-th (zero-based, from least significant) set bit.
#[inline]
fn select_bit(w: u64, k: u32) -> u32 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("bmi2") {
        // SAFETY: the feature check guards the intrinsic, which has no
        // other requirements; it only computes on its operands.
        let one = unsafe { core::arch::x86_64::_pdep_u64(1u64 << k, w) };
        return one.trailing_zeros();
    }
    let mut w = w;
    for _ in 0..k {
        w &= w - 1;
    }
    w.trailing_zeros()
}

/// Move classes bucketed by positive part of the energy increment. Move
/// `3*site + code` flips `site` to spin `code - 1`. The increment of a flip
/// `cur -> new` at a site with `deg` neighbors whose spins sum to `nsum` is
/// `deg*(new^2 - cur^2) - 2*(new - cur)*nsum`, so classification is
/// arithmetic on two cached per-site integers.
///
/// Classes are stored as counts plus one membership bitmap per class; the
/// sampled member is located by rank over the bitmap words. That makes
/// rebucketing a move (the bulk of the work per jump) a handful of
/// arithmetic instructions. The count and rate tables are sized so a `u8`
/// class can never index out of bounds.
struct Engine<'a> {
    /// Rate per class; zero above `MAX_DH`, so `rates[DEAD] = 0`.
    rates: [f64; 256],
    inv_rates: [f64; 32],
    state: Vec<i8>,
    neigh: Vec<[u16; 4]>,
    deg: Vec<i32>,
    nsum: Vec<i32>,
    /// Class of each move.
    class_of: Vec<u8>,
    /// Membership bitmaps, `words` words per class, move-indexed bits.
    bitmap: Vec<u64>,
    words: usize,
    /// Member count per class.
    len: [u32; 256],
    /// Bit c set iff class c (c <= MAX_DH) is non-empty.
    live: u32,
    keys: &'a [[u64; 3]],
    /// Configuration key of `state`, maintained incrementally.
    key: u64,
}

impl<'a> Engine<'a> {
    fn new(lat: &Lattice, beta: f64, start: &[i8], keys: &'a [[u64; 3]]) -> Engine<'a> {
        let n = start.len();
        let mut rates = [0.0; 256];
        let mut inv_rates = [0.0; 32];
        for c in 0..=MAX_DH {
            rates[c] = (-beta * c as f64).exp();
            inv_rates[c] = 1.0 / rates[c];
        }
        let neigh: Vec<[u16; 4]> = (0..n).map(|s| lat.neighbor_table(s)).collect();
        let deg: Vec<i32> =
            neigh.iter().map(|row| row.iter().filter(|&&nb| nb != u16::MAX).count() as i32).collect();
        let nsum: Vec<i32> = neigh
            .iter()
            .map(|row| {
                row.iter()
                    .filter(|&&nb| nb != u16::MAX)
                    .map(|&nb| start[nb as usize] as i32)
                    .sum()
            })
            .collect();
        let words = (3 * n).div_ceil(64);
        let mut eng = Engine {
            rates,
            inv_rates,
            state: start.to_vec(),
            neigh,
            deg,
            nsum,
            class_of: vec![DEAD; 3 * n],
            bitmap: vec![0; (DEAD as usize + 1) * words],
            words,
            len: [0; 256],
            live: 0,
            keys,
            key: key_of(keys, start),
        };
        for m in 0..3 * n as u32 {
            let c = eng.classify(m) as usize;
            eng.class_of[m as usize] = c as u8;
            eng.bitmap[c * words + (m >> 6) as usize] |= 1 << (m & 63);
            eng.len[c] += 1;
            if c <= MAX_DH {
                eng.live |= 1 << c;
            }
        }
        eng
    }

    /// Positive part of the energy increment of a move, or DEAD.
    #[inline]
    fn classify(&self, m: u32) -> u8 {
        let site = (m / 3) as usize;
        let new_spin = (m % 3) as i32 - 1;
        let cur = self.state[site] as i32;
        if new_spin == cur {
            return DEAD;
        }
        let dh = self.deg[site] * (new_spin * new_spin - cur * cur)
            - 2 * (new_spin - cur) * self.nsum[site];
        dh.max(0) as u8
    }

    #[inline]
    fn total_rate(&self) -> f64 {
        let mut r = 0.0;
        let mut mask = self.live;
        while mask != 0 {
            let c = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            r += self.len[c] as f64 * self.rates[c];
        }
        r
    }

    /// Draws a move proportionally to its rate with a single uniform draw:
    /// the leftover mass inside the chosen class indexes the member, which
    /// is uniform given the class. Rounding spill (the draw exceeding the
    /// accumulated mass, or the quotient reaching the class length) lands on
    /// the last member of the last non-empty class.
    #[inline]
    fn sample_move(&self, rng: &mut Xoshiro256PlusPlus, total: f64) -> u32 {
        let mut u = rng.gen::<f64>() * total;
        let mut mask = self.live;
        let mut c = 0usize;
        while mask != 0 {
            c = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            let mass = self.len[c] as f64 * self.rates[c];
            if u < mass {
                break;
            }
            u -= mass;
        }
        let idx = ((u * self.inv_rates[c]) as u32).min(self.len[c] - 1);
        self.member(c as u8, idx)
    }

    /// Index of the `idx`-th member (in move order) of class `c`, by rank
    /// over the class bitmap.
    #[inline]
    fn member(&self, c: u8, idx: u32) -> u32 {
        let base = c as usize * self.words;
        let mut remaining = idx;
        let mut last = 0;
        for j in 0..self.words {
            let w = self.bitmap[base + j];
            let cnt = w.count_ones();
            if remaining < cnt {
                return (j as u32) * 64 + select_bit(w, remaining);
            }
            remaining -= cnt;
            if w != 0 {
                last = (j as u32) * 64 + 63 - w.leading_zeros();
            }
        }
        // Unreachable when idx < len[c]; keep the last member as a guard.
        last
    }

    /// Rebuckets one move whose class may have changed.
    #[inline(always)]
    fn move_to(&mut self, m: u32, c_new: u8) {
        let c_old = self.class_of[m as usize];
        if c_old == c_new {
            return;
        }
        let (co, cn) = (c_old as usize, c_new as usize);
        let word = (m >> 6) as usize;
        let bit = 1u64 << (m & 63);
        self.bitmap[co * self.words + word] ^= bit;
        self.bitmap[cn * self.words + word] ^= bit;
        self.len[co] -= 1;
        if self.len[co] == 0 && co <= MAX_DH {
            self.live &= !(1 << co);
        }
        self.len[cn] += 1;
        if self.len[cn] == 1 && cn <= MAX_DH {
            self.live |= 1 << cn;
        }
        self.class_of[m as usize] = c_new;
    }

    /// Recomputes the classes of all three moves at one site from its cached
    /// degree and neighbor-spin sum, with the three increments unrolled.
    #[inline(always)]
    fn refresh_site(&mut self, site: usize) {
        let cur = self.state[site] as i32;
        let deg = self.deg[site];
        let s2 = 2 * self.nsum[site];
        let base = 3 * site as u32;
        let open = deg * (1 - cur * cur);
        let c_minus =
            if cur == -1 { DEAD } else { (open + (1 + cur) * s2).max(0) as u8 };
        let c_zero =
            if cur == 0 { DEAD } else { (cur * s2 - deg * (cur * cur)).max(0) as u8 };
        let c_plus = if cur == 1 { DEAD } else { (open - (1 - cur) * s2).max(0) as u8 };
        self.move_to(base, c_minus);
        self.move_to(base + 1, c_zero);
        self.move_to(base + 2, c_plus);
    }

    /// Executes a move and refreshes the classes of every affected move.
    #[inline]
    fn apply(&mut self, m: u32) {
        let site = (m / 3) as usize;
        let new_spin = (m % 3) as i8 - 1;
        let old = self.state[site];
        self.state[site] = new_spin;
        self.key ^= self.keys[site][(old + 1) as usize] ^ self.keys[site][(new_spin + 1) as usize];
        let d = (new_spin - old) as i32;
        self.refresh_site(site);
        let neigh = self.neigh[site];
        for nb in neigh {
            if nb != u16::MAX {
                let nb = nb as usize;
                self.nsum[nb] += d;
                self.refresh_site(nb);
            }
        }
    }
}

/// A strictly positive Exponential(rate) draw (ziggurat under the hood).
#[inline]
fn exp_draw(rng: &mut Xoshiro256PlusPlus, rate: f64) -> f64 {
    loop {
        let e: f64 = rng.sample(rand_distr::Exp1);
        if e > 0.0 {
            return e / rate;
        }
    }
}

fn run_replica(
    cfg: &SimulationConfig,
    marks: &MarkTable,
    start: &[i8],
    replica: usize,
) -> TransitionSample {
    // Golden-ratio mixing keeps per-replica streams distinct for one seed.
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(
        cfg.seed ^ (replica as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut eng = Engine::new(&cfg.lat, cfg.beta, start, &marks.keys);
    let scale = match cfg.time_convention {
        TimeConvention::Continuous => 1.0,
        TimeConvention::DiscreteScaled => 2.0 * cfg.lat.n_sites() as f64,
    };
    let mut time = 0.0f64;
    let mut jumps = 0u64;
    let mut sequence: Vec<i8> = Vec::new();
    if let Some(mark) = marks.get(eng.key, start) {
        if let Some(g) = mark.ground {
            sequence.push(g);
        }
    }
    loop {
        if jumps >= cfg.max_jumps || time >= cfg.max_time {
            return TransitionSample {
                hit_time: time * scale,
                hit_target: None,
                jumps,
                ground_sequence: sequence,
                capped: true,
            };
        }
        let total = eng.total_rate();
        time += exp_draw(&mut rng, total);
        let m = eng.sample_move(&mut rng, total);
        eng.apply(m);
        jumps += 1;
        if let Some(mark) = marks.get(eng.key, &eng.state) {
            if let Some(g) = mark.ground {
                if sequence.last() != Some(&g) {
                    sequence.push(g);
                }
            }
            if let Some(t) = mark.target {
                return TransitionSample {
                    hit_time: time * scale,
                    hit_target: Some(cfg.targets[t as usize].name.clone()),
                    jumps,
                    ground_sequence: sequence,
                    capped: false,
                };
            }
        }
    }
}

/// Runs all replicas and returns their samples in replica order. Replicas
/// run in parallel; each is deterministic given (seed, replica index).
pub fn simulate_hitting(cfg: &SimulationConfig) -> Result<Vec<TransitionSample>, KmcError> {
    cfg.validate()?;
    let mut marks = MarkTable::new(cfg.lat.n_sites());
    for (ti, t) in cfg.targets.iter().enumerate() {
        for m in &t.members {
            marks.entry(m.spins()).target.get_or_insert(ti as u32);
        }
    }
    for (gi, g) in ground_states(&cfg.lat).iter().enumerate() {
        marks.entry(g.spins()).ground = Some(gi as i8 - 1);
    }
    let start = cfg.start.spins();
    let samples: Vec<TransitionSample> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| run_replica(cfg, &marks, &start, r))
        .collect();
    Ok(samples)
}

/// Fraction of unflagged samples absorbed by one named set.
#[derive(Debug, Clone, Serialize)]
pub struct TargetFraction {
    pub name: String,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HittingStats {
    pub n_used: usize,
    pub n_flagged: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Per-target absorption fractions, sorted by target name.
    pub hit_fractions: Vec<TargetFraction>,
    /// Kolmogorov-Smirnov distance of time/mean from the unit exponential.
    pub ks_stat: f64,
    /// Asymptotic Kolmogorov-Smirnov p-value.
    pub ks_p: f64,
}

/// Asymptotic Kolmogorov p-value with the finite-sample size correction.
fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sq = (n as f64).sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64 * lambda).powi(2)).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Mean, standard error, absorption fractions, and the exponential-law test
/// over the unflagged samples.
pub fn estimate_stats(samples: &[TransitionSample]) -> Result<HittingStats, KmcError> {
    let used: Vec<&TransitionSample> = samples.iter().filter(|s| !s.capped).collect();
    let n = used.len();
    if n < 100 {
        return Err(KmcError::Insufficient { have: n, need: 100 });
    }
    let nf = n as f64;
    let mean = used.iter().map(|s| s.hit_time).sum::<f64>() / nf;
    let var = used.iter().map(|s| (s.hit_time - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let stderr = (var / nf).sqrt();

    let mut counts: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for s in &used {
        let name = s.hit_target.as_deref().expect("unflagged samples carry a target");
        *counts.entry(name).or_insert(0) += 1;
    }
    let hit_fractions = counts
        .into_iter()
        .map(|(name, count)| TargetFraction {
            name: name.to_string(),
            count,
            fraction: count as f64 / nf,
        })
        .collect();

    let mut xs: Vec<f64> = used.iter().map(|s| s.hit_time / mean).collect();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("hitting times are finite"));
    let mut ks_stat = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = 1.0 - (-x).exp();
        ks_stat = ks_stat.max((f - i as f64 / nf).abs()).max((f - (i + 1) as f64 / nf).abs());
    }
    let ks_p = ks_pvalue(ks_stat, n);

    Ok(HittingStats { n_used: n, n_flagged: samples.len() - n, mean, stderr, hit_fractions, ks_stat, ks_p })
}

/// Empirical next-ground-state statistics. Row and column indices 0, 1, 2
/// stand for the all-minus, all-zero, and all-plus states.
#[derive(Debug, Clone, Serialize)]
pub struct SequenceStats {
    pub counts: [[u64; 3]; 3],
    pub fractions: [[f64; 3]; 3],
    pub row_totals: [u64; 3],
}

/// Tallies consecutive pairs of visited ground states across all samples.
pub fn sequence_stats(samples: &[TransitionSample]) -> SequenceStats {
    let mut counts = [[0u64; 3]; 3];
    for s in samples {
        for w in s.ground_sequence.windows(2) {
            counts[(w[0] + 1) as usize][(w[1] + 1) as usize] += 1;
        }
    }
    let mut fractions = [[0.0f64; 3]; 3];
    let mut row_totals = [0u64; 3];
    for i in 0..3 {
        row_totals[i] = counts[i].iter().sum();
        if row_totals[i] > 0 {
            for j in 0..3 {
                fractions[i][j] = counts[i][j] as f64 / row_totals[i] as f64;
            }
        }
    }
    SequenceStats { counts, fractions, row_totals }
}
