//! Property suites run by `lglab verify`. Each suite returns named checks
//! with explicit bounds; the summary is a pure function of the seed.

use lglab_core::analyzers::{hardmax_threshold, mlp_bounds};
use lglab_core::linalg::dist;
use lglab_core::lt::{attention_distribution, forward_last, forward_trace};
use lglab_core::random::{grid_model, histogram_readout, random_seq};
use lglab_core::rng::{stream_rng, stream_seed};
use lglab_core::simulators::{
    attention_sets, best_markov_sim, build_joint_sim, bulk_check, find_filler, hard_attention_forward, markov_subsample,
    ratio_guarantee_holds, ratio_rounding, sample_iid,
};
use lglab_core::tasks::{
    construct_kgram_lt, construct_modp_lt, construct_simple_lt, gen_kgram, gen_modp, gen_simple, target_kgram, target_modp,
    target_simple,
};
use lglab_core::{LtParams, PrecisionMode, Result, TokenSeq};
use lglab_trainer::{gradient_check, init_model, ArchConfig, PeKind};
use rand::Rng;
use serde::Serialize;

pub const SUITES: [&str; 6] = ["hardmax", "rounding", "markov", "bulk", "gradients", "constructions"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, max: f64) -> Self {
        Check { name: name.into(), value, min: None, max: Some(max), passed: value <= max }
    }

    pub fn at_least(name: &str, value: f64, min: f64) -> Self {
        Check { name: name.into(), value, min: Some(min), max: None, passed: value >= min }
    }

    pub fn within(name: &str, value: f64, min: f64, max: f64) -> Self {
        Check { name: name.into(), value, min: Some(min), max: Some(max), passed: (min..=max).contains(&value) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub tolerance_scale: f64,
    pub passed: bool,
    /// `suite/check` for every failed check.
    pub failures: Vec<String>,
    pub suites: Vec<SuiteReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Largest elementwise gap between finite-precision attention at the
/// hardmax threshold and the uniform distribution over the argmax, and
/// between the model output and the explicit hard-attention formula.
pub fn hardmax_errors(seed: u64, models: usize) -> Result<(f64, f64)> {
    let (mut attn, mut out) = (0.0f64, 0.0f64);
    for i in 0..models {
        let mut rng = stream_rng(seed, i as u64);
        let m = grid_model(&mut rng, 3, 2, 1, 2.0);
        let len = (hardmax_threshold(&m, 16)? as usize).max(m.tau + 2);
        let x = random_seq(&mut rng, 3, len);
        let mode = PrecisionMode::finite(16);
        let states = forward_trace(&m, mode, &x)?.states;
        let w = attention_distribution(&m, mode, &states[0], 0, 0, len, len)?;
        let sets = attention_sets(&m, 16, &x, false)?;
        let argmax: Vec<usize> = sets.prefix_positions.iter().chain(&sets.suffix_positions).copied().collect();
        let u = 1.0 / argmax.len() as f64;
        for (j, wj) in w.iter().enumerate() {
            let want = if argmax.contains(&(j + 1)) { u } else { 0.0 };
            attn = attn.max((wj - want).abs());
        }
        out = out.max(dist(&forward_last(&m, mode, &x)?, &hard_attention_forward(&m, 16, &x)?));
    }
    Ok((attn, out))
}

/// Number of random instances violating `Σm = N` or the per-entry ratio
/// guarantee.
pub fn rounding_violations(seed: u64, instances: usize) -> Result<usize> {
    let mut rng = stream_rng(seed, 0);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=50);
        let big_n = rng.random_range(1..=10_000u64);
        let mut p: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() }).collect();
        if p.iter().all(|&v| v == 0.0) {
            p[0] = 1.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let m = ratio_rounding(&p, big_n)?;
        if m.iter().sum::<u64>() != big_n || !ratio_guarantee_holds(&p, big_n, &m) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Two one-layer grid models on vocabulary `{1..4}` in which token 4 never
/// reaches a maximal logit, together with an input of length `len`.
pub fn joint_pair<R: Rng + ?Sized>(rng: &mut R, len: usize) -> (LtParams, LtParams, TokenSeq) {
    let mut f = grid_model(rng, 4, 2, 1, 2.0);
    let mut g = grid_model(rng, 4, 2, 1, 2.0);
    for m in [&mut f, &mut g] {
        for c in 0..6 {
            m.layers[0].heads[0].kq.set(3, c, -4.0);
        }
    }
    let x = random_seq(rng, 4, len);
    (f, g, x)
}

/// One joint simulation measured against its length bound and the scale
/// `M_f (S + tau) eps` (largest over the two models).
#[derive(Clone, Copy, Debug)]
pub struct JointOutcome {
    pub len_z: usize,
    pub len_bound: f64,
    pub scaled_err: f64,
}

pub fn joint_outcome(f: &LtParams, g: &LtParams, x: &TokenSeq, eps: f64) -> Result<JointOutcome> {
    let filler = find_filler(f, g, 16, x)?;
    let r = build_joint_sim(f, g, 16, x, eps, filler)?;
    let scale = |m: &LtParams| -> Result<f64> { Ok(mlp_bounds(m)?.m_f * (m.s_vocab + m.tau) as f64 * eps) };
    let scaled_err = (r.err_f / scale(f)?).max(r.err_g.unwrap_or(0.0) / scale(g)?);
    Ok(JointOutcome { len_z: r.len_z, len_bound: 20.0 / (eps * eps) + (f.tau + f.delta) as f64, scaled_err })
}

/// Sequence of constant runs of length `block`, each a uniform token.
/// `block = 1` gives an iid uniform sequence.
pub fn block_seq<R: Rng + ?Sized>(rng: &mut R, s_vocab: usize, len: usize, block: usize) -> TokenSeq {
    if block <= 1 {
        return random_seq(rng, s_vocab, len);
    }
    let mut v = Vec::with_capacity(len);
    while v.len() < len {
        let t = rng.random_range(1..=s_vocab);
        v.extend(std::iter::repeat_n(t, block.min(len - v.len())));
    }
    TokenSeq::new(v).expect("nonempty, ids >= 1")
}

/// Median best Markov-simulation error of the histogram readout for each
/// target length, over `seeds` independent subsampling streams. The input is
/// built by `block_seq` with the given run length.
pub fn markov_medians(seed: u64, x_len: usize, block: usize, ns: &[usize], tries: usize, seeds: usize) -> Result<Vec<f64>> {
    let f = histogram_readout(3);
    let x = block_seq(&mut stream_rng(seed, 0), 3, x_len, block);
    ns.iter()
        .map(|&n| {
            let errs = (0..seeds)
                .map(|s| {
                    Ok(best_markov_sim(&f, &x, n, 0, tries, &mut stream_rng(stream_seed(seed, 1 + n as u64), s as u64))?.err_f)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(median(errs))
        })
        .collect()
}

/// Count of Markov subsamples that are not strictly increasing, miss the
/// final `tau + 1` positions, or fall outside the Chebyshev length band.
pub fn markov_structure_violations(seed: u64, draws: usize) -> Result<(usize, f64)> {
    let mut rng = stream_rng(seed, 2);
    let x = random_seq(&mut rng, 3, 20_000);
    let (n, tau) = (500usize, 2usize);
    let band = (2.0 * (n as f64).powf(4.0 / 3.0) / 0.15).sqrt();
    let (mut bad, mut outside) = (0, 0);
    for _ in 0..draws {
        let idx = markov_subsample(&x, n, tau, &mut rng)?;
        let increasing = idx.windows(2).all(|w| w[0] < w[1]);
        let tail = idx.len() > tau && idx[idx.len() - tau - 1..] == (x.len() - tau..=x.len()).collect::<Vec<_>>()[..];
        if !increasing || !tail {
            bad += 1;
        }
        if (idx.len() as f64 - (n + tau + 1) as f64).abs() > band {
            outside += 1;
        }
    }
    Ok((bad, outside as f64 / draws as f64))
}

/// Length at which the bulk event has probability at least `1 - rho`.
pub fn bulk_length(s: usize, delta: usize, d_tol: f64, rho: f64) -> usize {
    (delta as f64 / (d_tol * d_tol) * (2.0 * s as f64 * delta as f64 / rho).ln()).ceil() as usize
}

/// Fraction of iid uniform sequences of the bulk length outside the bulk.
pub fn bulk_failure_rate(seed: u64, sequences: usize) -> Result<f64> {
    let (s, delta, d_tol, rho) = (3, 2, 0.05, 0.05);
    let t = bulk_length(s, delta, d_tol, rho);
    let p = vec![1.0 / s as f64; s];
    let mut rng = stream_rng(seed, 0);
    let mut out = 0;
    for _ in 0..sequences {
        let x = sample_iid(&p, t, &mut rng)?;
        if !bulk_check(&x, &p, delta, 0, d_tol) {
            out += 1;
        }
    }
    Ok(out as f64 / sequences as f64)
}

/// Worst relative finite-difference gap over all parameter groups for a
/// model of the given depth, after perturbing the initialization.
pub fn gradient_worst(seed: u64, depth: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    let pes = [PeKind::None, PeKind::Periodic { delta: 3 }, PeKind::RelativeLocal { tau: 2 }];
    for (i, pe) in pes.into_iter().enumerate() {
        let mut rng = stream_rng(seed, (10 * depth + i) as u64);
        let arch = ArchConfig { depth, heads_l1: 2, d: 4, mlp_width: 5, pe };
        let mut model = init_model(arch, 3, 2, &mut rng)?;
        for (_, t) in model.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
        }
        let data: Vec<(TokenSeq, Vec<f64>)> =
            (0..3).map(|_| (random_seq(&mut rng, 3, 7), (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        worst = worst.max(gradient_check(&model, &data, 1e-5, 1e-8)?.worst_rel);
    }
    Ok(worst)
}

pub fn modp_construction_error(seed: u64, inputs: usize) -> Result<f64> {
    let m = construct_modp_lt(3, 1, 50.0)?;
    let mut rng = stream_rng(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = gen_modp(1000, 3, &mut rng)?;
        worst = worst.max((forward_last(&m, PrecisionMode::Infinite, &x)?[0] - target_modp(&x, 3, 1)?).abs());
    }
    Ok(worst)
}

pub fn simple_construction_error(seed: u64, inputs: usize) -> Result<f64> {
    let m = construct_simple_lt(3.0, 1e-3)?;
    let mut rng = stream_rng(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = gen_simple(1000, &mut rng)?;
        worst = worst.max((forward_last(&m, PrecisionMode::Infinite, &x)?[0] - target_simple(&x, 3.0)?).abs());
    }
    Ok(worst)
}

/// True when no token of the final `k`-context occurs among the first `k`
/// positions, so start-of-sequence keys cannot imitate a context match.
pub fn kgram_clean_start(x: &TokenSeq, k: usize) -> bool {
    let t = x.tokens();
    let ctx = &t[t.len() - k..];
    t[..k].iter().all(|s| !ctx.contains(s))
}

/// Worst k-gram construction error (k = 2, S = 2, beta = 30) over `inputs`
/// generated sequences of length 256, optionally only clean-start ones.
pub fn kgram_construction_error(seed: u64, inputs: usize, clean_only: bool) -> Result<f64> {
    let m = construct_kgram_lt(2, 2, 30.0)?;
    let mut rng = stream_rng(seed, 2);
    let (mut worst, mut seen) = (0.0f64, 0);
    while seen < inputs {
        let x = gen_kgram(256, 2, 2, &mut rng)?;
        if clean_only && !kgram_clean_start(&x, 2) {
            continue;
        }
        seen += 1;
        worst = worst.max(dist(&forward_last(&m, PrecisionMode::Infinite, &x)?, &target_kgram(&x, 2, 2)?));
    }
    Ok(worst)
}

fn suite_checks(name: &str, seed: u64) -> Result<Vec<Check>> {
    Ok(match name {
        "hardmax" => {
            let (attn, out) = hardmax_errors(seed, 50)?;
            vec![
                Check::at_most("attention_is_uniform_over_argmax", attn, 1e-9),
                Check::at_most("output_matches_hard_attention", out, 1e-8),
            ]
        }
        "rounding" => {
            let bad = rounding_violations(seed, 2000)?;
            let mut checks = vec![Check::at_most("ratio_rounding_exact", bad as f64, 0.0)];
            let (mut len_ratio, mut finite) = (0.0f64, true);
            for i in 0..4 {
                let (f, g, x) = joint_pair(&mut stream_rng(seed, 100 + i), 2000);
                for eps in [0.2, 0.1] {
                    let o = joint_outcome(&f, &g, &x, eps)?;
                    len_ratio = len_ratio.max(o.len_z as f64 / o.len_bound);
                    finite &= o.scaled_err.is_finite();
                }
            }
            checks.push(Check::at_most("joint_length_within_bound", len_ratio, 1.0));
            checks.push(Check::at_least("joint_errors_finite", finite as u8 as f64, 1.0));
            checks
        }
        "markov" => {
            // Runs of 1000 equal tokens make subsample runs fully correlated,
            // which is the regime where the decay is n^(-1/3).
            let ns = [100.0, 1000.0, 10_000.0];
            let meds = markov_medians(seed, 100_000, 1000, &[100, 1000, 10_000], 8, 7)?;
            let (bad, outside) = markov_structure_violations(seed, 200)?;
            vec![
                Check::at_most("subsample_structure", bad as f64, 0.0),
                Check::at_most("subsample_length_band", outside, 0.15),
                Check::within("histogram_error_slope", log_log_slope(&ns, &meds), -0.55, -0.18),
            ]
        }
        "bulk" => vec![Check::at_most("out_of_bulk_fraction", bulk_failure_rate(seed, 2000)?, 0.05)],
        "gradients" => vec![
            Check::at_most("depth1_relative_gap", gradient_worst(seed, 1)?, 1e-4),
            Check::at_most("depth2_relative_gap", gradient_worst(seed, 2)?, 1e-4),
        ],
        "constructions" => vec![
            Check::at_most("modp_error", modp_construction_error(seed, 20)?, 1e-6),
            Check::at_most("simple_error", simple_construction_error(seed, 20)?, 2e-3),
            Check::at_most("kgram_error_clean_start", kgram_construction_error(seed, 20, true)?, 1e-4),
        ],
        other => unreachable!("unknown suite {other}"),
    })
}

/// Runs the named suite (or every suite for `all`). Upper bounds are
/// multiplied by `tolerance_scale`.
pub fn run_verify(suite: &str, seed: u64, tolerance_scale: f64) -> std::result::Result<VerifyReport, crate::CliError> {
    let names: Vec<&str> = match suite {
        "all" => SUITES.to_vec(),
        s if SUITES.contains(&s) => vec![s],
        s => return Err(crate::CliError::Usage(format!("unknown suite '{s}'; expected one of {} or all", SUITES.join(", ")))),
    };
    let mut suites = Vec::new();
    for name in names {
        let idx = SUITES.iter().position(|s| *s == name).expect("known suite") as u64;
        let mut checks = suite_checks(name, stream_seed(seed, idx))?;
        for c in checks.iter_mut() {
            if let Some(max) = c.max.as_mut() {
                if max.is_sign_positive() {
                    *max *= tolerance_scale;
                }
            }
            c.passed = c.min.is_none_or(|lo| c.value >= lo) && c.max.is_none_or(|hi| c.value <= hi);
        }
        suites.push(SuiteReport { suite: name.to_string(), passed: checks.iter().all(|c| c.passed), checks });
    }
    let failures: Vec<String> = suites
        .iter()
        .flat_map(|s| s.checks.iter().filter(|c| !c.passed).map(move |c| format!("{}/{}", s.suite, c.name)))
        .collect();
    Ok(VerifyReport { seed, tolerance_scale, passed: failures.is_empty(), failures, suites })
}
