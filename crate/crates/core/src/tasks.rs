//! Synthetic tasks: generators, ground-truth targets and hand-built models.
//!
//! Task symbols are 0-based; token ids are `symbol + 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lt::{HeadParams, Layer, LtParams, MlpParams, TokenSeq};
use crate::simulators::{dirichlet_seq, sample_iid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum TaskSpec {
    SimpleTask { omega: f64 },
    ModPTask { period: usize, k: usize },
    KGram { k: usize, s_vocab: usize },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::SimpleTask { omega } if !omega.is_finite() => {
                Err(Error::Precondition(format!("omega must be finite, got {omega}")))
            }
            TaskSpec::ModPTask { period, k } if period < 2 || k >= period => {
                Err(Error::Precondition(format!("need period >= 2 and 0 <= k < period, got period {period}, k {k}")))
            }
            TaskSpec::KGram { k, s_vocab } if k < 1 || s_vocab < 2 => {
                Err(Error::Precondition(format!("need k >= 1 and s_vocab >= 2, got k {k}, s_vocab {s_vocab}")))
            }
            _ => Ok(()),
        }
    }

    pub fn s_vocab(&self) -> usize {
        match *self {
            TaskSpec::SimpleTask { .. } => 3,
            TaskSpec::ModPTask { .. } => 2,
            TaskSpec::KGram { s_vocab, .. } => s_vocab,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            TaskSpec::KGram { s_vocab, .. } => s_vocab,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::SimpleTask { .. } => "simple",
            TaskSpec::ModPTask { .. } => "modp",
            TaskSpec::KGram { .. } => "kgram",
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Result<TokenSeq> {
        self.validate()?;
        match *self {
            TaskSpec::SimpleTask { .. } => gen_simple(t, rng),
            TaskSpec::ModPTask { period, .. } => gen_modp(t, period, rng),
            TaskSpec::KGram { k, s_vocab } => gen_kgram(t, s_vocab, k, rng),
        }
    }

    pub fn target(&self, x: &TokenSeq) -> Result<Vec<f64>> {
        match *self {
            TaskSpec::SimpleTask { omega } => target_simple(x, omega).map(|v| vec![v]),
            TaskSpec::ModPTask { period, k } => target_modp(x, period, k).map(|v| vec![v]),
            TaskSpec::KGram { k, s_vocab } => target_kgram(x, k, s_vocab),
        }
    }
}

fn count(x: &TokenSeq, id: usize) -> usize {
    x.tokens().iter().filter(|&&t| t == id).count()
}

/// `p` uniform on the simplex, then `t` iid symbols from `{0, 1, 2}`;
/// sequences with no 0 or 1 are redrawn.
pub fn gen_simple<R: Rng + ?Sized>(t: usize, rng: &mut R) -> Result<TokenSeq> {
    if t == 0 {
        return Err(Error::Precondition("length must be at least 1".into()));
    }
    loop {
        let (x, _) = dirichlet_seq(&[1.0; 3], t, rng)?;
        if count(&x, 1) + count(&x, 2) > 0 {
            return Ok(x);
        }
    }
}

/// `sin(omega (c0 - c1) / (c0 + c1))`.
pub fn target_simple(x: &TokenSeq, omega: f64) -> Result<f64> {
    let (c0, c1) = (count(x, 1) as f64, count(x, 2) as f64);
    if c0 + c1 == 0.0 {
        return Err(Error::UndefinedTarget("no symbol 0 or 1 in the sequence".into()));
    }
    Ok((omega * (c0 - c1) / (c0 + c1)).sin())
}

/// Binary symbols with `P(x_t = 1) = q_{t mod period}`, `q_j ~ U[0, 1]`.
pub fn gen_modp<R: Rng + ?Sized>(t: usize, period: usize, rng: &mut R) -> Result<TokenSeq> {
    if t == 0 || period < 2 {
        return Err(Error::Precondition("need length >= 1 and period >= 2".into()));
    }
    let q: Vec<f64> = (0..period).map(|_| rng.random()).collect();
    TokenSeq::new((1..=t).map(|j| 1 + usize::from(rng.random::<f64>() < q[j % period])).collect())
}

/// Mean symbol over positions `t ≡ k (mod period)`.
pub fn target_modp(x: &TokenSeq, period: usize, k: usize) -> Result<f64> {
    if period == 0 {
        return Err(Error::Precondition("period must be positive".into()));
    }
    let (mut sum, mut n) = (0usize, 0usize);
    for t in (1..=x.len()).filter(|t| t % period == k) {
        sum += x.at(t) - 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedTarget(format!("no position is {k} mod {period}")));
    }
    Ok(sum as f64 / n as f64)
}

/// Markov rollout over `(k-1)`-token contexts with simplex-uniform rows,
/// then the final `k` tokens are copied over `x[i-k+1..=i]` for a uniform
/// `i` in `[k, T-1]`. Draws that leave the final context without an earlier
/// occurrence are redone.
pub fn gen_kgram<R: Rng + ?Sized>(t: usize, s_vocab: usize, k: usize, rng: &mut R) -> Result<TokenSeq> {
    if k < 1 || s_vocab < 2 || t < k + 2 {
        return Err(Error::Precondition(format!("need k >= 1, s_vocab >= 2, T >= k + 2; got k {k}, S {s_vocab}, T {t}")));
    }
    let contexts = s_vocab.pow((k - 1) as u32);
    let alpha = vec![1.0; s_vocab];
    for _ in 0..10_000 {
        let rows: Vec<Vec<f64>> = (0..contexts).map(|_| dirichlet_seq(&alpha, 1, rng).map(|(_, p)| p)).collect::<Result<_>>()?;
        let mut x: Vec<usize> = (0..k - 1).map(|_| rng.random_range(1..=s_vocab)).collect();
        while x.len() < t {
            let ctx = x[x.len() + 1 - k..].iter().fold(0, |acc, &s| acc * s_vocab + (s - 1));
            x.push(sample_iid(&rows[ctx], 1, rng)?.at(1));
        }
        for _ in 0..100 {
            let i = rng.random_range(k..=t - 1);
            let mut y = x.clone();
            let suffix = x[t - k..].to_vec();
            y[i - k..i].copy_from_slice(&suffix);
            let y = TokenSeq::new(y)?;
            if target_kgram(&y, k, s_vocab).is_ok() {
                return Ok(y);
            }
        }
    }
    Err(Error::Infeasible(format!("no sequence of length {t} with a repeated final {k}-gram was drawn")))
}

/// Normalized counts of the tokens that follow earlier occurrences of the
/// final `k` tokens.
pub fn target_kgram(x: &TokenSeq, k: usize, s_vocab: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if k == 0 || n < k + 1 {
        return Err(Error::UndefinedTarget(format!("need |x| >= k + 1, got |x| = {n}, k = {k}")));
    }
    x.check_vocab(s_vocab)?;
    let toks = x.tokens();
    let ctx = &toks[n - k..];
    let mut out = vec![0.0; s_vocab];
    let mut total = 0usize;
    for t in k..n {
        if &toks[t - k..t] == ctx {
            out[toks[t] - 1] += 1.0;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedTarget("the final k-gram has no earlier occurrence".into()));
    }
    out.iter_mut().for_each(|v| *v /= total as f64);
    Ok(out)
}

/// Number of `t` in `[k+1, T]` whose preceding `k` tokens equal the final `k`.
pub fn kgram_matches(x: &TokenSeq, k: usize) -> usize {
    let toks = x.tokens();
    let n = toks.len();
    if n < k + 1 {
        return 0;
    }
    (k..n).filter(|&t| toks[t - k..t] == toks[n - k..]).count()
}

/// One-layer model averaging the binary symbol over positions `≡ k (mod
/// period)`. Coordinates: `period` positional one-hots, two token one-hots
/// and an output slot.
pub fn construct_modp_lt(period: usize, k: usize, beta: f64) -> Result<LtParams> {
    if period < 2 || k >= period || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Precondition("need period >= 2, k < period and finite beta > 0".into()));
    }
    let d = period + 3;
    let (tok0, tok1, out) = (period, period + 1, period + 2);
    let mut m = LtParams::zeros(2, d, period, 0, &[1], 1);
    for r in 0..period {
        m.pos.set(r, r, 1.0);
    }
    m.embed.set(0, tok0, 1.0);
    m.embed.set(1, tok1, 1.0);
    // Positions with residue k sit on positional row k - 1.
    let row = (k + period - 1) % period;
    let head = &mut m.layers[0].heads[0];
    head.kq.set(row, tok0, beta);
    head.kq.set(row, tok1, beta);
    head.v.set(out, tok1, 1.0);
    m.layers[0].mlp = MlpParams::zeros(d, 1);
    m.unembed.set(0, out, 1.0);
    Ok(m)
}

/// Logit given to keys holding symbol 0 or 1 in the simple-task model.
pub const SIMPLE_BETA: f64 = 40.0;

/// Knots of the piecewise-linear `sin(omega z)` interpolant on `[-1, 1]`.
pub fn simple_knot_count(omega: f64, eps_mlp: f64) -> usize {
    ((omega * omega / (2.0 * eps_mlp)).ceil() as usize).max(1)
}

/// One-layer model for the simple task. Coordinates 0..3 hold the token,
/// coordinate 3 the signed ratio `(c0 - c1) / (c0 + c1)` written by the head,
/// coordinate 4 the output written by the relu MLP.
pub fn construct_simple_lt(omega: f64, eps_mlp: f64) -> Result<LtParams> {
    if !omega.is_finite() || !(eps_mlp > 0.0) {
        return Err(Error::Precondition("need finite omega and eps_mlp > 0".into()));
    }
    let (z, out) = (3, 4);
    let mut m = LtParams::zeros(3, 5, 1, 0, &[1], 1);
    for t in 0..3 {
        m.embed.set(t, t, 1.0);
    }
    let head = &mut m.layers[0].heads[0];
    for key in 0..2 {
        for query in 0..3 {
            head.kq.set(key, query, SIMPLE_BETA);
        }
    }
    head.v.set(z, 0, 1.0);
    head.v.set(z, 1, -1.0);

    let n = simple_knot_count(omega, eps_mlp);
    let g = |t: f64| (omega * t).sin();
    let knots: Vec<f64> = (0..=n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    let slopes: Vec<f64> = knots.windows(2).map(|w| (g(w[1]) - g(w[0])) / (w[1] - w[0])).collect();
    // Units: constant, relu(z + 1), relu(z - t_i) for interior knots, relu(z - 1).
    let width = n + 2;
    let mut mlp = MlpParams::zeros(5, width);
    mlp.bias[0] = 1.0;
    mlp.b.set(out, 0, g(-1.0));
    for (unit, &t) in knots.iter().enumerate() {
        let u = unit + 1;
        mlp.a.set(u, z, 1.0);
        mlp.bias[u] = -t;
        let before = if unit == 0 { 0.0 } else { slopes[unit - 1] };
        let after = slopes.get(unit).copied().unwrap_or(0.0);
        mlp.b.set(out, u, after - before);
    }
    m.layers[0].mlp = mlp;
    m.unembed.set(0, out, 1.0);
    Ok(m)
}

/// Two-layer model for the in-context k-gram task.
///
/// Residual blocks of width `s_vocab`: block 0 holds the current token,
/// block `h` (1..=k) the token `h` positions back (written by first-layer
/// head `h` through `phi[h] = beta`), block `k + 1` the output. The
/// second-layer head scores `beta` per agreement between key block `h` and
/// query block `h - 1`, and copies the key's block 0 into the output block.
pub fn construct_kgram_lt(s_vocab: usize, k: usize, beta: f64) -> Result<LtParams> {
    if k < 1 || s_vocab < 2 || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Precondition("need k >= 1, s_vocab >= 2 and finite beta > 0".into()));
    }
    let s = s_vocab;
    let d = (k + 2) * s;
    let mut m = LtParams::zeros(s, d, 1, k, &[k, 1], s);
    for t in 0..s {
        m.embed.set(t, t, 1.0);
    }
    let heads1: Vec<HeadParams> = (1..=k)
        .map(|h| {
            let mut head = HeadParams::zeros(d, k);
            head.phi[h] = beta;
            for t in 0..s {
                head.v.set(h * s + t, t, 1.0);
            }
            head
        })
        .collect();
    let mut head2 = HeadParams::zeros(d, k);
    for h in 1..=k {
        for t in 0..s {
            head2.kq.set(h * s + t, (h - 1) * s + t, beta);
        }
    }
    for t in 0..s {
        head2.v.set((k + 1) * s + t, t, 1.0);
        m.unembed.set(t, (k + 1) * s + t, 1.0);
    }
    m.layers =
        vec![Layer { heads: heads1, mlp: MlpParams::zeros(d, 1) }, Layer { heads: vec![head2], mlp: MlpParams::zeros(d, 1) }];
    Ok(m)
}
