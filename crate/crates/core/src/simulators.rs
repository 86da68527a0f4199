//! Short simulation strings for long inputs, and the measurements around them.
//!
//! Residues follow the `j mod delta` convention (position `delta` has residue
//! 0); the engine reads positional row `(j - 1) mod delta` for the same
//! position. Keys more than `tau` positions behind the query form the
//! "prefix"; the last `tau + 1` positions form the window where `phi` acts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::analyzers::{check_fclass, hardmax_threshold, TIE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dist, dot};
use crate::lt::{forward_last, LtParams, PrecisionMode, TokenSeq};

/// `n(s, i, x)`: occurrences of token `s` at positions `j <= |x| - tau` with
/// `j ≡ i (mod delta)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTable {
    pub s_vocab: usize,
    pub delta: usize,
    counts: Vec<usize>,
}

impl CountTable {
    pub fn get(&self, s: usize, residue: usize) -> usize {
        if s == 0 || s > self.s_vocab {
            return 0;
        }
        self.counts[(s - 1) * self.delta + residue % self.delta]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn token_counts(x: &TokenSeq, delta: usize, tau: usize) -> Result<CountTable> {
    if delta == 0 {
        return Err(Error::Precondition("delta must be at least 1".into()));
    }
    if x.len() <= tau {
        return Err(Error::EmptyPrefix { len: x.len(), tau });
    }
    let s_vocab = x.tokens().iter().copied().max().unwrap_or(1);
    let mut counts = vec![0; s_vocab * delta];
    for j in 1..=x.len() - tau {
        counts[(x.at(j) - 1) * delta + j % delta] += 1;
    }
    Ok(CountTable { s_vocab, delta, counts })
}

/// Positions attended by the final query of a one-head, one-layer model in
/// the hardmax regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSets {
    /// Attended prefix positions `j <= |x| - tau - 1`, ascending.
    pub prefix_positions: Vec<usize>,
    /// Distinct `(token, j mod delta)` pairs realized by `prefix_positions`.
    pub prefix_pairs: BTreeSet<(usize, usize)>,
    /// Attended positions in the window `[|x| - tau, |x|]`, ascending.
    pub suffix_positions: Vec<usize>,
    /// `(token, position)` for each attended window position.
    pub suffix_pairs: Vec<(usize, usize)>,
    /// The maximal logit at the final query.
    pub max_logit: f64,
}

fn single_head_one_layer(params: &LtParams) -> Result<()> {
    if params.depth() != 1 {
        return Err(Error::UnsupportedDepth { expected: 1, found: params.depth() });
    }
    if params.layers[0].heads.len() != 1 {
        return Err(Error::Precondition(format!(
            "simulation constructions need a single head, model has {}",
            params.layers[0].heads.len()
        )));
    }
    Ok(())
}

/// Final-query logits (finite-mode convention: `phi` unscaled) over all keys.
fn final_logits(params: &LtParams, x: &TokenSeq) -> Vec<f64> {
    let head = &params.layers[0].heads[0];
    let n = x.len();
    let u = head.kq.matvec(&params.input_vector(x.at(n), params.pos_row(n)));
    (1..=n).map(|j| dot(&params.input_vector(x.at(j), params.pos_row(j)), &u) + head.phi_at(n - j)).collect()
}

/// Logit of a prefix key `(token, residue)` (no `phi`) for the final query of `x`.
fn prefix_logit(params: &LtParams, x: &TokenSeq, token: usize, residue: usize) -> f64 {
    let head = &params.layers[0].heads[0];
    let n = x.len();
    let u = head.kq.matvec(&params.input_vector(x.at(n), params.pos_row(n)));
    let row = (residue + params.delta - 1) % params.delta;
    dot(&params.input_vector(token, row), &u)
}

/// Attended positions at the last query. Errors below the hardmax threshold
/// unless `force` is set.
pub fn attention_sets(params: &LtParams, p_bits: u32, x: &TokenSeq, force: bool) -> Result<AttentionSets> {
    single_head_one_layer(params)?;
    x.check_vocab(params.s_vocab)?;
    if !force {
        let threshold = hardmax_threshold(params, p_bits)?;
        if (x.len() as u64) < threshold {
            return Err(Error::NotHardmax { len: x.len(), threshold });
        }
    }
    let n = x.len();
    let logits = final_logits(params, x);
    let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let window_start = n.saturating_sub(params.tau).max(1);
    let mut sets = AttentionSets {
        prefix_positions: Vec::new(),
        prefix_pairs: BTreeSet::new(),
        suffix_positions: Vec::new(),
        suffix_pairs: Vec::new(),
        max_logit,
    };
    for (k, a) in logits.iter().enumerate() {
        if max_logit - a > TIE_TOL {
            continue;
        }
        let j = k + 1;
        if j < window_start {
            sets.prefix_positions.push(j);
            sets.prefix_pairs.insert((x.at(j), j % params.delta));
        } else {
            sets.suffix_positions.push(j);
            sets.suffix_pairs.push((x.at(j), j));
        }
    }
    Ok(sets)
}

/// Output of a one-head, one-layer model at the last position computed from
/// its attention sets: an average of value vectors over attended prefix
/// pairs (weighted by their counts) and attended window positions, followed
/// by the residual MLP and readout.
pub fn hard_attention_forward(params: &LtParams, p_bits: u32, x: &TokenSeq) -> Result<Vec<f64>> {
    let sets = attention_sets(params, p_bits, x, false)?;
    let head = &params.layers[0].heads[0];
    let delta = params.delta;
    let mut pair_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &j in &sets.prefix_positions {
        *pair_counts.entry((x.at(j), j % delta)).or_default() += 1;
    }
    let mut acc = vec![0.0; params.d];
    let mut total = 0usize;
    for (&(s, r), &c) in &pair_counts {
        let row = (r + delta - 1) % delta;
        axpy(&mut acc, c as f64, &head.v.matvec(&params.input_vector(s, row)));
        total += c;
    }
    for &j in &sets.suffix_positions {
        axpy(&mut acc, 1.0, &head.v.matvec(&params.input_vector(x.at(j), params.pos_row(j))));
        total += 1;
    }
    let n = x.len();
    let mut y = params.input_vector(x.at(n), params.pos_row(n));
    axpy(&mut y, 1.0 / total as f64, &acc);
    let mlp = &params.layers[0].mlp;
    let hidden: Vec<f64> = mlp.a.matvec(&y).iter().zip(&mlp.bias).map(|(h, b)| mlp.activation.apply(h + b)).collect();
    axpy(&mut y, 1.0, &mlp.b.matvec(&hidden));
    Ok(params.unembed.matvec(&y))
}

/// Exact floor of `p * n` for `p >= 0` and `n < 2^53`.
fn floor_mul(p: f64, n: u64) -> u64 {
    let nf = n as f64;
    let prod = p * nf;
    let err = p.mul_add(nf, -prod);
    let k = prod.floor();
    if prod == k && err < 0.0 {
        (k - 1.0) as u64
    } else {
        k as u64
    }
}

/// Exact comparison of `p * n` with the integer `m`.
pub fn cmp_product(p: f64, n: u64, m: i64) -> Ordering {
    let nf = n as f64;
    let prod = p * nf;
    let mf = m as f64;
    if prod > mf {
        Ordering::Greater
    } else if prod < mf {
        Ordering::Less
    } else {
        p.mul_add(nf, -prod).partial_cmp(&0.0).expect("finite")
    }
}

/// Checks `|m_i / N - p_i| <= 1/N` for every `i` in exact arithmetic.
pub fn ratio_guarantee_holds(p: &[f64], n: u64, m: &[u64]) -> bool {
    p.iter().zip(m).all(|(&pi, &mi)| {
        let mi = mi as i64;
        cmp_product(pi, n, mi - 1) != Ordering::Less && cmp_product(pi, n, mi + 1) != Ordering::Greater
    })
}

/// Integer counts `m` with `Σ m = N` and `|m_i / N - p_i| <= 1/N`: floors of
/// `p_i N`, with the shortfall handed out one unit each to the lowest indices.
pub fn ratio_rounding(p: &[f64], n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Precondition("N must be at least 1".into()));
    }
    if n as f64 >= 9.0e15 {
        return Err(Error::Precondition("N must be below 2^53".into()));
    }
    if let Some(k) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {k} is {}", p[k])));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}, not 1")));
    }
    let mut m: Vec<u64> = p.iter().map(|&v| floor_mul(v, n)).collect();
    let floor_sum: u64 = m.iter().sum();
    let r = n.checked_sub(floor_sum).filter(|&r| r as usize <= m.len()).ok_or_else(|| {
        Error::InvalidDistribution(format!("floors sum to {floor_sum}, cannot reach N = {n} with one unit per entry"))
    })?;
    for mi in m.iter_mut().take(r as usize) {
        *mi += 1;
    }
    Ok(m)
}

/// The integer analogue of [`ratio_rounding`] for weights `w / total`:
/// `floor(n w_i / total)` plus remainder units to the first entries.
fn ratio_counts(weights: &[u64], total: u64, n: u64) -> Vec<u64> {
    let mut m: Vec<u64> = weights.iter().map(|&w| ((n as u128 * w as u128) / total as u128) as u64).collect();
    let r = (n - m.iter().sum::<u64>()) as usize;
    for mi in m.iter_mut().take(r) {
        *mi += 1;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    JointHard,
    Suffix,
    Markov,
}

/// A simulation string and the output discrepancies it induces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub z: TokenSeq,
    pub err_f: f64,
    pub err_g: Option<f64>,
    pub len_z: usize,
    pub method: SimMethod,
    /// `eps` for the joint construction; the target length for suffix and
    /// Markov simulation.
    pub epsilon: f64,
    pub seed: Option<u64>,
}

/// Which branch of the joint construction produced the counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointCase {
    /// Both attention patterns are small: exact copy of their union.
    DirectCopy,
    /// Small overlap: the larger pattern is rescaled to `ceil(1/eps^2)` on its own.
    SmallOverlap,
    /// Large overlap with a small first pattern: exact copy of the union.
    LargeOverlapCopy,
    /// Large overlap: the larger pattern's extra pairs follow the first pattern's scale.
    LargeOverlapScaled,
}

#[derive(Clone, Debug)]
pub struct JointSim {
    pub z: TokenSeq,
    pub case: JointCase,
    /// True when the roles of the two models were exchanged so that the
    /// first pattern is the smaller one.
    pub swapped: bool,
}

type Pair = (usize, usize);

fn pair_counts(x: &TokenSeq, sets: &AttentionSets, delta: usize) -> BTreeMap<Pair, u64> {
    let mut c = BTreeMap::new();
    for &j in &sets.prefix_positions {
        *c.entry((x.at(j), j % delta)).or_default() += 1;
    }
    c
}

/// Checks that `filler` is strictly below the maximal logit of `params` at
/// every residue, for the final query of `x`.
fn validate_filler(params: &LtParams, x: &TokenSeq, sets: &AttentionSets, filler: usize, label: char) -> Result<()> {
    for residue in 0..params.delta {
        if sets.max_logit - prefix_logit(params, x, filler, residue) <= TIE_TOL {
            return Err(Error::FillerRejected { token: filler, residue, model: label });
        }
    }
    Ok(())
}

/// Smallest token usable as filler for both models on input `x`.
pub fn find_filler(f: &LtParams, g: &LtParams, p_bits: u32, x: &TokenSeq) -> Result<usize> {
    let sf = attention_sets(f, p_bits, x, true)?;
    let sg = attention_sets(g, p_bits, x, true)?;
    (1..=f.s_vocab)
        .find(|&t| validate_filler(f, x, &sf, t, 'f').is_ok() && validate_filler(g, x, &sg, t, 'g').is_ok())
        .ok_or_else(|| Error::Infeasible("every token reaches the maximal logit of one of the models at some residue".into()))
}

/// Lays out a multiset of `(token, residue)` pairs from position `start`
/// onward: at each position, place the smallest remaining token whose
/// residue matches, otherwise the filler.
fn place_block(block: &BTreeMap<Pair, u64>, delta: usize, filler: usize, out: &mut Vec<usize>) {
    let mut per_residue: Vec<Vec<(usize, u64)>> = vec![Vec::new(); delta];
    for (&(s, r), &m) in block {
        if m > 0 {
            per_residue[r].push((s, m));
        }
    }
    let mut remaining: u64 = block.values().sum();
    let mut cursor = vec![0usize; delta];
    while remaining > 0 {
        let r = (out.len() + 1) % delta;
        let queue = &mut per_residue[r];
        if cursor[r] < queue.len() {
            let (s, m) = &mut queue[cursor[r]];
            out.push(*s);
            *m -= 1;
            if *m == 0 {
                cursor[r] += 1;
            }
            remaining -= 1;
        } else {
            out.push(filler);
        }
    }
}

/// The joint simulation string for two one-head, one-layer models.
pub fn joint_sim_string(f: &LtParams, g: &LtParams, p_bits: u32, x: &TokenSeq, eps: f64, filler: usize) -> Result<JointSim> {
    single_head_one_layer(f)?;
    single_head_one_layer(g)?;
    if (f.s_vocab, f.delta, f.tau) != (g.s_vocab, g.delta, g.tau) {
        return Err(Error::Precondition("models must share vocabulary, period and locality".into()));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Precondition(format!("eps must lie in (0, 1], got {eps}")));
    }
    if filler == 0 || filler > f.s_vocab {
        return Err(Error::Precondition(format!("filler {filler} is not a token of the vocabulary")));
    }
    let (delta, tau) = (f.delta, f.tau);
    if x.len() < tau + 1 {
        return Err(Error::InputTooShort(format!("|x| = {} < tau + 1 = {}", x.len(), tau + 1)));
    }
    let threshold = hardmax_threshold(f, p_bits)?.max(hardmax_threshold(g, p_bits)?);
    let sf = attention_sets(f, p_bits, x, false)?;
    let sg = attention_sets(g, p_bits, x, false)?;
    validate_filler(f, x, &sf, filler, 'f')?;
    validate_filler(g, x, &sg, filler, 'g')?;

    let (mut nf, mut ng) = (pair_counts(x, &sf, delta), pair_counts(x, &sg, delta));
    let (mut pf, mut pg) = (nf.values().sum::<u64>(), ng.values().sum::<u64>());
    let swapped = pf > pg;
    if swapped {
        std::mem::swap(&mut nf, &mut ng);
        std::mem::swap(&mut pf, &mut pg);
    }
    let inv = 1.0 / eps;
    let k = inv.ceil() as u64;
    let small_f = pf as f64 <= inv;
    let small_g = pg as f64 <= inv;

    let mut block_f: BTreeMap<Pair, u64> = BTreeMap::new();
    let mut block_g: BTreeMap<Pair, u64> = BTreeMap::new();
    let g_only: Vec<Pair> = ng.keys().filter(|p| !nf.contains_key(p)).copied().collect();

    let case = if small_f && small_g {
        block_f = nf.clone();
        for p in &g_only {
            block_g.insert(*p, ng[p]);
        }
        JointCase::DirectCopy
    } else {
        // First pattern: exact copy when small, else scaled to ceil(1/eps) with
        // remainder units going first to shared pairs.
        if small_f {
            block_f = nf.clone();
        } else {
            let mut order: Vec<Pair> = nf.keys().filter(|p| ng.contains_key(p)).copied().collect();
            order.extend(nf.keys().filter(|p| !ng.contains_key(p)));
            let weights: Vec<u64> = order.iter().map(|p| nf[p]).collect();
            for (p, m) in order.iter().zip(ratio_counts(&weights, pf, k)) {
                block_f.insert(*p, m);
            }
        }
        let overlap: u64 = nf.keys().filter_map(|p| ng.get(p)).sum();
        if overlap as f64 <= eps * pg as f64 {
            let n2 = (inv * inv).ceil() as u64;
            let keys: Vec<Pair> = ng.keys().copied().collect();
            let weights: Vec<u64> = keys.iter().map(|p| ng[p]).collect();
            for (p, m) in keys.iter().zip(ratio_counts(&weights, pg, n2)) {
                if !nf.contains_key(p) {
                    block_g.insert(*p, m);
                }
            }
            JointCase::SmallOverlap
        } else if small_f {
            for p in &g_only {
                block_g.insert(*p, ng[p]);
            }
            JointCase::LargeOverlapCopy
        } else {
            // Anchor on the most frequent first-pattern pair; ties go to the
            // first in (token, residue) order.
            let (star, &n_star) = nf
                .iter()
                .fold(None, |best: Option<(&Pair, &u64)>, (p, c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((p, c)),
                })
                .expect("large pattern is nonempty");
            let m_star = block_f[star] as u128;
            let n_star = n_star as u128;
            let mut m: Vec<u64> = g_only.iter().map(|p| ((m_star * ng[p] as u128) / n_star) as u64).collect();
            let total: u128 = g_only.iter().map(|p| ng[p] as u128).sum();
            let r = ((m_star * total) / n_star) as u64 - m.iter().sum::<u64>();
            for mi in m.iter_mut().take(r as usize) {
                *mi += 1;
            }
            for (p, mi) in g_only.iter().zip(m) {
                block_g.insert(*p, mi);
            }
            JointCase::LargeOverlapScaled
        }
    };

    let mut z = Vec::new();
    place_block(&block_f, delta, filler, &mut z);
    place_block(&block_g, delta, filler, &mut z);
    // Pad so that |z| reaches the hardmax threshold and |z| ≡ |x| (mod delta).
    let window = tau + 1;
    let mut len = z.len() + window;
    let target_len = (threshold as usize).max(len);
    let mut pad = target_len - len;
    len += pad;
    pad += (x.len() % delta + delta - len % delta) % delta;
    z.extend(std::iter::repeat_n(filler, pad));
    z.extend_from_slice(&x.tokens()[x.len() - window..]);
    Ok(JointSim { z: TokenSeq::new(z)?, case, swapped })
}

/// Builds the joint simulation string and measures both models' final
/// outputs on `x` and `z` in finite precision.
pub fn build_joint_sim(f: &LtParams, g: &LtParams, p_bits: u32, x: &TokenSeq, eps: f64, filler: usize) -> Result<SimReport> {
    let sim = joint_sim_string(f, g, p_bits, x, eps, filler)?;
    let mode = PrecisionMode::finite(p_bits);
    let err_f = measure_discrepancy(f, mode, x, &sim.z)?;
    let err_g = measure_discrepancy(g, mode, x, &sim.z)?;
    Ok(SimReport {
        len_z: sim.z.len(),
        z: sim.z,
        err_f,
        err_g: Some(err_g),
        method: SimMethod::JointHard,
        epsilon: eps,
        seed: None,
    })
}

/// The last `N'` tokens of `x`, where `N'` is the smallest length `>= n`
/// with `N' ≡ |x| (mod delta)`.
pub fn suffix_sim(x: &TokenSeq, n: usize, delta: usize) -> Result<TokenSeq> {
    if delta == 0 || n == 0 {
        return Err(Error::Precondition("need n >= 1 and delta >= 1".into()));
    }
    let len = x.len();
    let n_prime = n + (len % delta + delta - n % delta) % delta;
    if n_prime > len {
        return Err(Error::InputTooShort(format!("no suffix length in [{n}, {len}] is congruent to |x| mod {delta}")));
    }
    TokenSeq::new(x.tokens()[len - n_prime..].to_vec())
}

/// Whether every `(token, residue)` frequency `n(s, i, x) / (|x| / delta)`
/// is within `d_tol` of `p_s`.
pub fn bulk_check(x: &TokenSeq, p: &[f64], delta: usize, tau: usize, d_tol: f64) -> bool {
    let Ok(counts) = token_counts(x, delta, tau) else {
        return false;
    };
    let scale = x.len() as f64 / delta as f64;
    let s_max = p.len().max(counts.s_vocab);
    (1..=s_max).all(|s| {
        let ps = p.get(s - 1).copied().unwrap_or(0.0);
        (0..delta).all(|i| (counts.get(s, i) as f64 / scale - ps).abs() <= d_tol)
    })
}

/// Draws `p ~ Dirichlet(alpha)` from normalized Gamma variates, then `t` iid
/// tokens from `p`.
pub fn dirichlet_seq<R: Rng + ?Sized>(alpha: &[f64], t: usize, rng: &mut R) -> Result<(TokenSeq, Vec<f64>)> {
    if alpha.is_empty() || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::Precondition("Dirichlet parameters must be positive and finite".into()));
    }
    if t == 0 {
        return Err(Error::Precondition("sequence length must be at least 1".into()));
    }
    let gammas: Vec<Gamma<f64>> =
        alpha.iter().map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::Precondition(e.to_string()))).collect::<Result<_>>()?;
    let p = loop {
        let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            break draws.iter().map(|v| v / total).collect::<Vec<f64>>();
        }
    };
    let seq = sample_iid(&p, t, rng)?;
    Ok((seq, p))
}

/// `t` iid tokens from distribution `p` over `{1..p.len()}`.
pub fn sample_iid<R: Rng + ?Sized>(p: &[f64], t: usize, rng: &mut R) -> Result<TokenSeq> {
    let dist = WeightedIndex::new(p).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    TokenSeq::new((0..t).map(|_| dist.sample(rng) + 1).collect())
}

/// Sorted 1-based index set from a stationary two-state chain whose "keep"
/// state has probability `n / |x|` and mean dwell `n^{1/3}`, plus the last
/// `tau + 1` positions.
pub fn markov_subsample<R: Rng + ?Sized>(x: &TokenSeq, n: usize, tau: usize, rng: &mut R) -> Result<Vec<usize>> {
    let len = x.len();
    if n < tau + 1 || n > len {
        return Err(Error::Precondition(format!("need tau + 1 = {} <= n <= |x| = {len}, got n = {n}", tau + 1)));
    }
    if n == len {
        return Ok((1..=len).collect());
    }
    let p = n as f64 / len as f64;
    let mut q = (n as f64).powf(-1.0 / 3.0);
    let mut r = p * q / (1.0 - p);
    if r > 1.0 {
        // Keep the stationary law at p when the entry rate would exceed 1.
        r = 1.0;
        q = (1.0 - p) / p;
    }
    let chain_end = len - tau - 1;
    let mut out = Vec::with_capacity(n + tau + 1);
    let mut on = rng.random::<f64>() < p;
    for j in 1..=chain_end {
        if j > 1 {
            let u: f64 = rng.random();
            on = if on { u >= q } else { u < r };
        }
        if on {
            out.push(j);
        }
    }
    out.extend(chain_end + 1..=len);
    Ok(out)
}

pub fn subsequence(x: &TokenSeq, idx: &[usize]) -> Result<TokenSeq> {
    TokenSeq::new(idx.iter().map(|&j| x.at(j)).collect())
}

/// Best of `k_tries` Markov subsamples, scored by the infinite-precision
/// final-output discrepancy of a two-layer local model.
pub fn best_markov_sim<R: Rng + ?Sized>(
    f: &LtParams,
    x: &TokenSeq,
    n: usize,
    tau: usize,
    k_tries: usize,
    rng: &mut R,
) -> Result<SimReport> {
    check_fclass(f)?;
    if tau < f.tau {
        return Err(Error::Precondition(format!("tau = {tau} is below the model's locality {}", f.tau)));
    }
    if k_tries == 0 {
        return Err(Error::Precondition("k_tries must be at least 1".into()));
    }
    let fx = forward_last(f, PrecisionMode::Infinite, x)?;
    let mut best: Option<(f64, TokenSeq)> = None;
    for _ in 0..k_tries {
        let idx = markov_subsample(x, n, tau, rng)?;
        let z = subsequence(x, &idx)?;
        let err = dist(&fx, &forward_last(f, PrecisionMode::Infinite, &z)?);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, z));
        }
    }
    let (err_f, z) = best.expect("at least one try");
    Ok(SimReport { len_z: z.len(), z, err_f, err_g: None, method: SimMethod::Markov, epsilon: n as f64, seed: None })
}

/// Suffix simulation report for one model in the given precision mode.
pub fn suffix_sim_report(f: &LtParams, mode: PrecisionMode, x: &TokenSeq, n: usize) -> Result<SimReport> {
    let z = suffix_sim(x, n, f.delta)?;
    let err_f = measure_discrepancy(f, mode, x, &z)?;
    Ok(SimReport { len_z: z.len(), z, err_f, err_g: None, method: SimMethod::Suffix, epsilon: n as f64, seed: None })
}

/// Euclidean distance between the final outputs on `x` and `z`.
pub fn measure_discrepancy(f: &LtParams, mode: PrecisionMode, x: &TokenSeq, z: &TokenSeq) -> Result<f64> {
    Ok(dist(&forward_last(f, mode, x)?, &forward_last(f, mode, z)?))
}
