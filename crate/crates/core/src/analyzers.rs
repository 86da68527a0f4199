//! Margins, hardmax thresholds, complexity and Lipschitz-type constants.
//!
//! All universal constants hidden in the asymptotic bounds are fixed to 1,
//! so the numbers are meaningful up to universal constants only.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::lt::LtParams;

/// Two logits closer than this are treated as equal.
pub const TIE_TOL: f64 = 1e-12;

/// Largest threshold we report; beyond it lengths are not representable
/// exactly as `f64` integers.
pub const MAX_THRESHOLD: f64 = 9_007_199_254_740_992.0; // 2^53

fn require_depth(params: &LtParams, depth: usize) -> Result<()> {
    if params.depth() != depth {
        return Err(Error::UnsupportedDepth { expected: depth, found: params.depth() });
    }
    Ok(())
}

/// Bilinear attention table of head `h` of a one-layer model.
///
/// Row `(y, i)` is a query with token `y` at positional row `i`, column
/// `(z, j)` a key with token `z` at positional row `j`; both flatten to
/// `(token - 1) * delta + row`. The entry is the logit without the `phi` term:
/// `(E_z + p_j)^T KQ (E_y + p_i)`.
pub fn attention_matrix(params: &LtParams, h: usize) -> Result<Matrix> {
    require_depth(params, 1)?;
    let head = params.layers[0].heads.get(h).ok_or_else(|| Error::Precondition(format!("head {h} out of range")))?;
    let (s, delta) = (params.s_vocab, params.delta);
    let n = s * delta;
    let inputs: Vec<Vec<f64>> =
        (1..=s).flat_map(|tok| (0..delta).map(move |r| (tok, r))).map(|(tok, r)| params.input_vector(tok, r)).collect();
    let mut out = Matrix::zeros(n, n);
    for (q, yq) in inputs.iter().enumerate() {
        let u = head.kq.matvec(yq);
        for (k, yk) in inputs.iter().enumerate() {
            out.set(q, k, crate::linalg::dot(yk, &u));
        }
    }
    Ok(out)
}

/// Every logit value a query of class `(y, r)` can see for one head: the
/// window offsets `0..=tau` with their `phi` bonus, and every key class at
/// `phi = 0` for keys further back.
fn attainable_logits(params: &LtParams, table: &Matrix, phi: &[f64], y: usize, r: usize) -> Vec<f64> {
    let delta = params.delta;
    let q = (y - 1) * delta + r;
    let mut vals = Vec::with_capacity(params.s_vocab * (params.tau + 1 + delta));
    for (k, ph) in phi.iter().enumerate() {
        let row = (r + delta * (k / delta + 1) - k) % delta;
        for z in 1..=params.s_vocab {
            vals.push(table.get(q, (z - 1) * delta + row) + ph);
        }
    }
    for z in 1..=params.s_vocab {
        for row in 0..delta {
            vals.push(table.get(q, (z - 1) * delta + row));
        }
    }
    vals
}

/// Smallest gap between distinct values, grouping values within [`TIE_TOL`].
fn min_positive_gap(vals: &mut [f64]) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite logits"));
    vals.windows(2).map(|w| w[1] - w[0]).filter(|&g| g > TIE_TOL).fold(f64::INFINITY, f64::min)
}

/// Logit margin of a one-layer model: the smallest positive gap between two
/// logits attainable by the same query class, over all heads. `+inf` when
/// each class only ever sees one value.
pub fn logit_margin(params: &LtParams) -> Result<f64> {
    require_depth(params, 1)?;
    let mut gamma = f64::INFINITY;
    for (h, head) in params.layers[0].heads.iter().enumerate() {
        let table = attention_matrix(params, h)?;
        for y in 1..=params.s_vocab {
            for r in 0..params.delta {
                let mut vals = attainable_logits(params, &table, &head.phi, y, r);
                gamma = gamma.min(min_positive_gap(&mut vals));
            }
        }
    }
    Ok(gamma)
}

/// Smallest length at which finite-precision attention with `p_bits` bits
/// is exactly hardmax: `ceil(2^(p / gamma))`, or 1 for an infinite margin.
pub fn threshold_for_margin(gamma: f64, p_bits: u32) -> Result<u64> {
    if gamma.is_infinite() {
        return Ok(1);
    }
    let v = 2f64.powf(p_bits as f64 / gamma);
    if !v.is_finite() || v > MAX_THRESHOLD {
        return Err(Error::Overflow(format!(
            "hardmax threshold 2^({p_bits}/{gamma}) exceeds 2^53; use a model with a larger logit margin"
        )));
    }
    // Snap values that are integers up to rounding of the exponent.
    let r = v.round();
    let t = if (v - r).abs() <= 1e-9 * r.max(1.0) { r } else { v.ceil() };
    Ok(t.max(1.0) as u64)
}

pub fn hardmax_threshold(params: &LtParams, p_bits: u32) -> Result<u64> {
    threshold_for_margin(logit_margin(params)?, p_bits)
}

/// Checks the two-layer local shape: two layers, zero positional table,
/// nonnegative first-layer `phi`, one second-layer head with zero `phi`.
pub fn check_fclass(params: &LtParams) -> Result<()> {
    if params.depth() != 2 {
        return Err(Error::FClass(format!("layers: expected 2, found {}", params.depth())));
    }
    if !params.pos.is_zero() {
        return Err(Error::FClass("pos: positional table must be zero".into()));
    }
    for (h, head) in params.layers[0].heads.iter().enumerate() {
        if let Some(t) = head.phi.iter().position(|&v| v < 0.0) {
            return Err(Error::FClass(format!("layers[0].heads[{h}].phi[{t}] = {} is negative", head.phi[t])));
        }
    }
    if params.layers[1].heads.len() != 1 {
        return Err(Error::FClass(format!("layers[1].heads: expected 1, found {}", params.layers[1].heads.len())));
    }
    if let Some(t) = params.layers[1].heads[0].phi.iter().position(|&v| v != 0.0) {
        return Err(Error::FClass(format!("layers[1].heads[0].phi[{t}] must be zero")));
    }
    for s in 0..params.s_vocab {
        let n = norm(params.embed.row(s));
        if n > 1.0 + 1e-12 {
            warn!("embedding of token {} has norm {n:.4} > 1; complexity constants assume unit-bounded embeddings", s + 1);
        }
    }
    Ok(())
}

/// Positional margin of a two-layer local model: for each first-layer head
/// the gap between the two largest values of `{phi[t]} ∪ {1}`, minimized
/// over heads; `+inf` when every such set is a single value.
pub fn positional_margin(params: &LtParams) -> Result<f64> {
    check_fclass(params)?;
    let mut margin = f64::INFINITY;
    for head in &params.layers[0].heads {
        let mut vals = head.phi.clone();
        vals.push(1.0);
        vals.sort_by(|a, b| b.partial_cmp(a).expect("finite phi"));
        let top = vals[0];
        if let Some(next) = vals.iter().find(|&&v| top - v > TIE_TOL) {
            margin = margin.min(top - next);
        }
    }
    if margin.is_infinite() {
        warn!("positional margin undefined (every phi set collapses to one value); reporting +inf");
    }
    Ok(margin)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub g_f: f64,
    pub lip_f: f64,
    pub h_f: f64,
}

/// Spectral norms shared by the two-layer constants.
struct FirstLayerNorms {
    /// `‖V_{1,h}‖` per head.
    v: Vec<f64>,
    /// `‖KQ_{1,h}‖` per head.
    kq: Vec<f64>,
    /// `‖B_1‖ ‖A_1‖`.
    ab: f64,
}

fn first_layer_norms(params: &LtParams) -> Result<FirstLayerNorms> {
    let l1 = &params.layers[0];
    Ok(FirstLayerNorms {
        v: l1.heads.iter().map(|h| h.v.spectral_norm()).collect::<Result<_>>()?,
        kq: l1.heads.iter().map(|h| h.kq.spectral_norm()).collect::<Result<_>>()?,
        ab: l1.mlp.b.spectral_norm()? * l1.mlp.a.spectral_norm()?,
    })
}

/// First-layer constants of a two-layer local model:
/// `G = (1 + Σ‖V‖)(1 + ‖B‖‖A‖)`,
/// `L = 2S (Σ ‖V‖ e^{4‖KQ‖}) (1 + ‖B‖‖A‖)`,
/// `H = (1 + ‖B‖‖A‖)(τ² + 1) Σ e^{4‖KQ‖}`.
pub fn lipschitz_constants(params: &LtParams) -> Result<LipschitzConstants> {
    check_fclass(params)?;
    let n = first_layer_norms(params)?;
    let mlp = 1.0 + n.ab;
    let sum_v: f64 = n.v.iter().sum();
    let sum_v_exp: f64 = n.v.iter().zip(&n.kq).map(|(v, k)| v * (4.0 * k).exp()).sum();
    let sum_exp: f64 = n.kq.iter().map(|k| (4.0 * k).exp()).sum();
    let tau = params.tau as f64;
    Ok(LipschitzConstants {
        g_f: (1.0 + sum_v) * mlp,
        lip_f: 2.0 * params.s_vocab as f64 * sum_v_exp * mlp,
        h_f: mlp * (tau * tau + 1.0) * sum_exp,
    })
}

/// Complexity of a two-layer local model (universal constant set to 1).
/// Overflow yields `+inf` with a warning.
pub fn complexity(params: &LtParams) -> Result<f64> {
    check_fclass(params)?;
    let n = first_layer_norms(params)?;
    let l2 = &params.layers[1];
    let head2 = &l2.heads[0];
    let kq2 = head2.kq.spectral_norm()?;
    let v2 = head2.v.spectral_norm()?;
    let ab2 = l2.mlp.b.spectral_norm()? * l2.mlp.a.spectral_norm()?;
    let u = params.unembed.spectral_norm()?;
    let sum_v: f64 = n.v.iter().sum();
    let tau = params.tau as f64;

    let exponent = (1.0 + sum_v).powi(2) * (1.0 + n.ab).powi(2) * kq2;
    let sum_v_exp: f64 = n.v.iter().zip(&n.kq).map(|(v, k)| v * (4.0 * k).exp()).sum();
    let factors = [1.0 + v2, sum_v_exp, 1.0 + ab2, u, tau * tau + 1.0, params.s_vocab as f64];
    if factors.contains(&0.0) {
        return Ok(0.0);
    }
    let log_c = exponent + factors.iter().map(|f| f.ln()).sum::<f64>();
    if log_c >= f64::MAX.ln() || log_c.is_nan() {
        warn!("complexity overflows f64 (log C = {log_c:.3e}); reporting +inf");
        return Ok(f64::INFINITY);
    }
    Ok(log_c.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBounds {
    pub l_mlp: f64,
    pub m_v: f64,
    pub m_e: f64,
    pub m_f: f64,
}

/// Output bounds for a one-layer model.
///
/// `l_mlp = ‖U‖(1 + ‖A‖‖B‖)`, `m_e = max ‖E_s + p_i‖`,
/// `m_v = Σ_h max ‖V_h (E_s + p_i)‖` and
/// `m_f = l_mlp (m_e + m_v) + ‖U‖ max(1 + ‖A‖‖B‖, ‖B‖) ‖b‖`, which bounds
/// `‖f(x)‖` for every input and every 1-Lipschitz activation fixing 0.
pub fn mlp_bounds(params: &LtParams) -> Result<MlpBounds> {
    require_depth(params, 1)?;
    let layer = &params.layers[0];
    let u = params.unembed.spectral_norm()?;
    let a = layer.mlp.a.spectral_norm()?;
    let b = layer.mlp.b.spectral_norm()?;
    let inputs: Vec<Vec<f64>> = (1..=params.s_vocab)
        .flat_map(|s| (0..params.delta).map(move |r| (s, r)))
        .map(|(s, r)| params.input_vector(s, r))
        .collect();
    let m_e = inputs.iter().map(|y| norm(y)).fold(0.0, f64::max);
    let m_v: f64 = layer.heads.iter().map(|h| inputs.iter().map(|y| norm(&h.v.matvec(y))).fold(0.0, f64::max)).sum();
    let l_mlp = u * (1.0 + a * b);
    let bias = norm(&layer.mlp.bias);
    let m_f = l_mlp * (m_e + m_v) + u * (1.0 + a * b).max(b) * bias;
    Ok(MlpBounds { l_mlp, m_v, m_e, m_f })
}

/// Serialize `Option<f64>` as a number, the string `"inf"` for `+inf`, or
/// `null` when the quantity does not apply to the model.
mod inf_num {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Str(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Str(s)) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// Every analyzer quantity for one model. Fields that do not apply to the
/// model's depth are `None` (one-layer quantities vs two-layer ones).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    #[serde(with = "inf_num")]
    pub logit_margin: Option<f64>,
    pub hardmax_threshold: Option<u64>,
    #[serde(with = "inf_num")]
    pub positional_margin: Option<f64>,
    #[serde(with = "inf_num")]
    pub complexity: Option<f64>,
    #[serde(with = "inf_num")]
    pub l_mlp: Option<f64>,
    #[serde(with = "inf_num")]
    pub m_v: Option<f64>,
    #[serde(with = "inf_num")]
    pub m_e: Option<f64>,
    #[serde(with = "inf_num")]
    pub m_f: Option<f64>,
    #[serde(with = "inf_num")]
    pub g_f: Option<f64>,
    #[serde(with = "inf_num")]
    pub lip_f: Option<f64>,
    #[serde(with = "inf_num")]
    pub h_f: Option<f64>,
}

/// Full report: one-layer models get the margin/threshold/output bounds,
/// two-layer models must be of the local class and get the complexity and
/// first-layer constants. Other depths are a shape error.
pub fn analyze(params: &LtParams, p_bits: u32) -> Result<MarginReport> {
    let mut report = MarginReport {
        logit_margin: None,
        hardmax_threshold: None,
        positional_margin: None,
        complexity: None,
        l_mlp: None,
        m_v: None,
        m_e: None,
        m_f: None,
        g_f: None,
        lip_f: None,
        h_f: None,
    };
    match params.depth() {
        1 => {
            let gamma = logit_margin(params)?;
            report.logit_margin = Some(gamma);
            report.hardmax_threshold = match threshold_for_margin(gamma, p_bits) {
                Ok(t) => Some(t),
                Err(e) => {
                    warn!("{e}");
                    None
                }
            };
            let b = mlp_bounds(params)?;
            report.l_mlp = Some(b.l_mlp);
            report.m_v = Some(b.m_v);
            report.m_e = Some(b.m_e);
            report.m_f = Some(b.m_f);
        }
        2 => {
            report.positional_margin = Some(positional_margin(params)?);
            report.complexity = Some(complexity(params)?);
            let c = lipschitz_constants(params)?;
            report.g_f = Some(c.g_f);
            report.lip_f = Some(c.lip_f);
            report.h_f = Some(c.h_f);
        }
        n => return Err(Error::UnsupportedDepth { expected: 2, found: n }),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lt::{forward_last, PrecisionMode};
    use crate::random::{random_model, random_seq};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_norm(m: &Matrix) -> f64 {
        nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice()).singular_values().max()
    }

    #[test]
    fn zero_kq_gives_zero_table() {
        let m = LtParams::zeros(3, 2, 2, 1, &[1], 1);
        assert!(attention_matrix(&m, 0).unwrap().is_zero());
    }

    #[test]
    fn unit_vector_table() {
        let mut m = LtParams::zeros(1, 2, 1, 0, &[1], 1);
        m.layers[0].heads[0].kq = Matrix::identity(2);
        m.embed = Matrix::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let a = attention_matrix(&m, 0).unwrap();
        assert_eq!(a.shape(), (1, 1));
        assert_eq!(a.get(0, 0), 1.0);
    }

    #[test]
    fn table_entries_match_per_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = random_model(&mut rng, 2, 3, 2, 1, &[1], 1.0);
        let a = attention_matrix(&m, 0).unwrap();
        let kq = &m.layers[0].heads[0].kq;
        for y in 1..=2 {
            for i in 0..2 {
                for z in 1..=2 {
                    for j in 0..2 {
                        let q: Vec<f64> = (0..3).map(|c| m.embed.get(y - 1, c) + m.pos.get(i, c)).collect();
                        let k: Vec<f64> = (0..3).map(|c| m.embed.get(z - 1, c) + m.pos.get(j, c)).collect();
                        let mut want = 0.0;
                        for r in 0..3 {
                            for c in 0..3 {
                                want += k[r] * kq.get(r, c) * q[c];
                            }
                        }
                        let got = a.get((y - 1) * 2 + i, (z - 1) * 2 + j);
                        assert!((got - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn multi_layer_rejected() {
        let m = LtParams::zeros(2, 2, 1, 0, &[1, 1], 1);
        assert!(matches!(attention_matrix(&m, 0), Err(Error::UnsupportedDepth { .. })));
        assert!(matches!(logit_margin(&m), Err(Error::UnsupportedDepth { .. })));
        assert!(matches!(mlp_bounds(&m), Err(Error::UnsupportedDepth { .. })));
    }

    #[test]
    fn equal_logits_have_infinite_margin() {
        let m = LtParams::zeros(3, 2, 2, 2, &[2], 1);
        assert_eq!(logit_margin(&m).unwrap(), f64::INFINITY);
        assert_eq!(hardmax_threshold(&m, 16).unwrap(), 1);
    }

    #[test]
    fn margin_of_zero_one_three() {
        // One token, tau = 2, no bilinear term: the class sees {phi} ∪ {0}.
        let mut m = LtParams::zeros(1, 1, 1, 2, &[1], 1);
        m.layers[0].heads[0].phi = vec![3.0, 1.0, 0.0];
        assert_eq!(logit_margin(&m).unwrap(), 1.0);
    }

    #[test]
    fn far_keys_count_as_zero_offset_logits() {
        // Every window offset carries +2, yet keys beyond the window sit at 0.
        let mut m = LtParams::zeros(1, 1, 1, 1, &[1], 1);
        m.layers[0].heads[0].phi = vec![2.0, 2.0];
        assert_eq!(logit_margin(&m).unwrap(), 2.0);
    }

    #[test]
    fn margin_matches_brute_force_on_grid_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let s = rng.random_range(1..4);
            let delta = rng.random_range(1..4);
            let tau = rng.random_range(0..3);
            let m = grid_model(&mut rng, s, delta, tau);
            let got = logit_margin(&m).unwrap();
            let want = brute_margin_all_z(&m);
            if want.is_infinite() {
                assert!(got.is_infinite());
            } else {
                assert_relative_eq!(got, want, max_relative = 1e-12);
            }
        }
    }

    /// Brute force over every key class and every offset up to `tau + delta`,
    /// comparing all pairs of values.
    fn brute_margin_all_z(m: &LtParams) -> f64 {
        let mut gamma = f64::INFINITY;
        let (s, delta, tau) = (m.s_vocab, m.delta, m.tau);
        for head in &m.layers[0].heads {
            for y in 1..=s {
                for r in 0..delta {
                    let q = m.input_vector(y, r);
                    let mut vals = Vec::new();
                    for k in 0..=tau + delta {
                        for z in 1..=s {
                            let row = ((r as isize - k as isize).rem_euclid(delta as isize)) as usize;
                            let key = m.input_vector(z, row);
                            let mut a = 0.0;
                            for i in 0..m.d {
                                for j in 0..m.d {
                                    a += key[i] * head.kq.get(i, j) * q[j];
                                }
                            }
                            vals.push(a + if k <= tau { head.phi[k] } else { 0.0 });
                        }
                    }
                    for a in &vals {
                        for b in &vals {
                            if b - a > TIE_TOL {
                                gamma = gamma.min(b - a);
                            }
                        }
                    }
                }
            }
        }
        gamma
    }

    /// One-hot token and position features with integer key-query entries,
    /// so every logit is an exact small integer.
    fn grid_model<R: Rng>(rng: &mut R, s: usize, delta: usize, tau: usize) -> LtParams {
        let d = s + delta;
        let mut m = LtParams::zeros(s, d, delta, tau, &[1], 1);
        for t in 0..s {
            m.embed.set(t, t, 1.0);
        }
        for r in 0..delta {
            m.pos.set(r, s + r, 1.0);
        }
        for r in 0..d {
            for c in 0..d {
                m.layers[0].heads[0].kq.set(r, c, rng.random_range(-2..=2) as f64);
            }
        }
        m.layers[0].heads[0].phi = (0..=tau).map(|_| rng.random_range(0..=2) as f64).collect();
        m.unembed = Matrix::identity(d);
        m
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_for_margin(4.0, 16).unwrap(), 16);
        assert_eq!(threshold_for_margin(f64::INFINITY, 16).unwrap(), 1);
        // 2^6.4 = 84.45, so the ceiling is 85.
        assert_eq!(threshold_for_margin(2.5, 16).unwrap(), 85);
        assert_eq!(threshold_for_margin(16.0 / 3.0, 16).unwrap(), 8);
        assert!(matches!(threshold_for_margin(0.25, 16), Err(Error::Overflow(_))));
    }

    fn fclass_model(tau: usize, heads: usize) -> LtParams {
        LtParams::zeros(2, 3, 1, tau, &[heads, 1], 1)
    }

    #[test]
    fn positional_margin_examples() {
        let mut m = fclass_model(2, 1);
        m.layers[0].heads[0].phi = vec![0.0, 0.0, 2.0];
        assert_eq!(positional_margin(&m).unwrap(), 1.0);
        m.layers[0].heads[0].phi = vec![0.0; 3];
        assert_eq!(positional_margin(&m).unwrap(), 1.0);
        m.layers[0].heads[0].phi = vec![1.0; 3];
        assert_eq!(positional_margin(&m).unwrap(), f64::INFINITY);
    }

    #[test]
    fn fclass_violations_name_the_field() {
        let mut m = fclass_model(1, 2);
        m.layers[0].heads[1].phi = vec![0.0, -0.5];
        let e = positional_margin(&m).unwrap_err();
        assert!(e.is_shape());
        assert!(e.to_string().contains("layers[0].heads[1].phi[1]"), "{e}");

        let mut m = fclass_model(1, 1);
        m.pos.set(0, 0, 0.1);
        assert!(complexity(&m).unwrap_err().to_string().contains("pos"));

        let mut m = fclass_model(1, 1);
        m.layers[1].heads[0].phi[0] = 0.5;
        assert!(lipschitz_constants(&m).unwrap_err().to_string().contains("layers[1].heads[0].phi[0]"));

        let m = LtParams::zeros(2, 3, 1, 1, &[1], 1);
        assert!(positional_margin(&m).unwrap_err().is_shape());
    }

    #[test]
    fn zero_model_constants() {
        let m = fclass_model(2, 3);
        let c = lipschitz_constants(&m).unwrap();
        assert_eq!(c.g_f, 1.0);
        assert_eq!(c.lip_f, 0.0);
        assert_eq!(c.h_f, 5.0 * 3.0);
        assert_eq!(complexity(&m).unwrap(), 0.0);
    }

    #[test]
    fn plug_in_constants() {
        let mut m = fclass_model(1, 1);
        m.layers[0].heads[0].v.set(0, 0, 1.0);
        let c = lipschitz_constants(&m).unwrap();
        assert_relative_eq!(c.g_f, 2.0, max_relative = 1e-12);
        assert_relative_eq!(c.lip_f, 4.0, max_relative = 1e-12);
        assert_relative_eq!(c.h_f, 2.0, max_relative = 1e-12);
    }

    fn random_fclass<R: Rng>(rng: &mut R, heads: usize, tau: usize) -> LtParams {
        let mut m = random_model(rng, 3, 4, 1, tau, &[heads, 1], 0.5);
        m.pos = Matrix::zeros(1, 4);
        for h in &mut m.layers[0].heads {
            h.phi.iter_mut().for_each(|p| *p = p.abs());
        }
        m.layers[1].heads[0].phi.iter_mut().for_each(|p| *p = 0.0);
        m
    }

    #[test]
    fn constants_match_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let m = random_fclass(&mut rng, 2, 2);
            let l1 = &m.layers[0];
            let ab = oracle_norm(&l1.mlp.b) * oracle_norm(&l1.mlp.a);
            let vs: Vec<f64> = l1.heads.iter().map(|h| oracle_norm(&h.v)).collect();
            let ks: Vec<f64> = l1.heads.iter().map(|h| oracle_norm(&h.kq)).collect();
            let g = (1.0 + vs.iter().sum::<f64>()) * (1.0 + ab);
            let sve: f64 = vs.iter().zip(&ks).map(|(v, k)| v * (4.0 * k).exp()).sum();
            let l = 2.0 * 3.0 * sve * (1.0 + ab);
            let h = (1.0 + ab) * 5.0 * ks.iter().map(|k| (4.0 * k).exp()).sum::<f64>();
            let c = lipschitz_constants(&m).unwrap();
            assert_relative_eq!(c.g_f, g, max_relative = 1e-6);
            assert_relative_eq!(c.lip_f, l, max_relative = 1e-6);
            assert_relative_eq!(c.h_f, h, max_relative = 1e-6);

            let l2 = &m.layers[1];
            let want_c = ((1.0 + vs.iter().sum::<f64>()).powi(2) * (1.0 + ab).powi(2) * oracle_norm(&l2.heads[0].kq)).exp()
                * (1.0 + oracle_norm(&l2.heads[0].v))
                * sve
                * (1.0 + oracle_norm(&l2.mlp.b) * oracle_norm(&l2.mlp.a))
                * oracle_norm(&m.unembed)
                * 5.0
                * 3.0;
            assert_relative_eq!(complexity(&m).unwrap(), want_c, max_relative = 1e-6);
        }
    }

    #[test]
    fn doubling_second_layer_kq_scales_by_exp_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = random_fclass(&mut rng, 1, 1);
        let c1 = complexity(&m).unwrap();
        let mut m2 = m.clone();
        m2.layers[1].heads[0].kq = m.layers[1].heads[0].kq.scaled(2.0);
        let c2 = complexity(&m2).unwrap();
        let n = first_layer_norms(&m).unwrap();
        let coef = (1.0 + n.v.iter().sum::<f64>()).powi(2) * (1.0 + n.ab).powi(2);
        let kq2 = m.layers[1].heads[0].kq.spectral_norm().unwrap();
        assert_relative_eq!(c2 / c1, (coef * kq2).exp(), max_relative = 1e-9);
    }

    #[test]
    fn complexity_overflow_is_infinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut m = random_fclass(&mut rng, 1, 1);
        m.layers[1].heads[0].kq = m.layers[1].heads[0].kq.scaled(1e6);
        assert_eq!(complexity(&m).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constants_monotone_under_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = random_fclass(&mut rng, 2, 1);
        let c0 = complexity(&base).unwrap();
        let l0 = lipschitz_constants(&base).unwrap();
        let edits: Vec<Box<dyn Fn(&mut LtParams)>> = vec![
            Box::new(|m| m.layers[0].heads[0].v = m.layers[0].heads[0].v.scaled(2.0)),
            Box::new(|m| m.layers[0].heads[1].kq = m.layers[0].heads[1].kq.scaled(2.0)),
            Box::new(|m| m.layers[0].mlp.a = m.layers[0].mlp.a.scaled(2.0)),
            Box::new(|m| m.layers[0].mlp.b = m.layers[0].mlp.b.scaled(2.0)),
            Box::new(|m| m.layers[1].heads[0].kq = m.layers[1].heads[0].kq.scaled(2.0)),
            Box::new(|m| m.layers[1].heads[0].v = m.layers[1].heads[0].v.scaled(2.0)),
            Box::new(|m| m.layers[1].mlp.b = m.layers[1].mlp.b.scaled(2.0)),
            Box::new(|m| m.unembed = m.unembed.scaled(2.0)),
        ];
        for edit in &edits {
            let mut m = base.clone();
            edit(&mut m);
            assert!(complexity(&m).unwrap() >= c0);
            let l = lipschitz_constants(&m).unwrap();
            assert!(l.g_f >= l0.g_f && l.lip_f >= l0.lip_f && l.h_f >= l0.h_f);
        }

        let one = random_model(&mut rng, 3, 3, 2, 1, &[2], 1.0);
        let b0 = mlp_bounds(&one).unwrap();
        let edits: Vec<Box<dyn Fn(&mut LtParams)>> = vec![
            Box::new(|m| m.layers[0].heads[1].v = m.layers[0].heads[1].v.scaled(2.0)),
            Box::new(|m| m.layers[0].mlp.a = m.layers[0].mlp.a.scaled(2.0)),
            Box::new(|m| m.layers[0].mlp.b = m.layers[0].mlp.b.scaled(2.0)),
            Box::new(|m| m.embed = m.embed.scaled(2.0)),
            Box::new(|m| m.unembed = m.unembed.scaled(2.0)),
        ];
        for edit in &edits {
            let mut m = one.clone();
            edit(&mut m);
            let b = mlp_bounds(&m).unwrap();
            assert!(b.l_mlp >= b0.l_mlp && b.m_v >= b0.m_v && b.m_f >= b0.m_f);
        }
    }

    #[test]
    fn mlp_bounds_plug_in() {
        let mut m = LtParams::zeros(2, 2, 1, 0, &[1], 2);
        m.unembed = Matrix::identity(2);
        m.embed = Matrix::identity(2);
        let b = mlp_bounds(&m).unwrap();
        assert_eq!((b.l_mlp, b.m_v, b.m_e, b.m_f), (1.0, 0.0, 1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_model(&mut rng, 3, 3, 2, 1, &[1], 1.0);
        let mut r3 = r.clone();
        r3.unembed = r.unembed.scaled(3.0);
        let (b1, b3) = (mlp_bounds(&r).unwrap(), mlp_bounds(&r3).unwrap());
        assert_relative_eq!(b3.l_mlp, 3.0 * b1.l_mlp, max_relative = 1e-9);
        assert_relative_eq!(b3.m_f, 3.0 * b1.m_f, max_relative = 1e-9);
    }

    #[test]
    fn outputs_stay_below_m_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for trial in 0..1000 {
            let mut m = random_model(&mut rng, 3, 3, 2, 1, &[1 + trial % 2], 1.0);
            // Include the regime where ‖B‖ exceeds 1 + ‖A‖‖B‖.
            if trial % 5 == 0 {
                m.layers[0].mlp.a = m.layers[0].mlp.a.scaled(0.01);
                m.layers[0].mlp.b = m.layers[0].mlp.b.scaled(5.0);
            }
            let bound = mlp_bounds(&m).unwrap().m_f;
            let len = rng.random_range(1..40);
            let x = random_seq(&mut rng, 3, len);
            for mode in [PrecisionMode::Infinite, PrecisionMode::finite(10)] {
                let out = forward_last(&m, mode, &x).unwrap();
                assert!(norm(&out) <= bound * (1.0 + 1e-9), "trial {trial}: {} > {bound}", norm(&out));
            }
        }
    }

    #[test]
    fn report_shapes_and_json() {
        let one = LtParams::zeros(2, 2, 1, 0, &[1], 1);
        let r = analyze(&one, 16).unwrap();
        assert_eq!(r.logit_margin, Some(f64::INFINITY));
        assert_eq!(r.hardmax_threshold, Some(1));
        assert!(r.complexity.is_none());
        let js = serde_json::to_string(&r).unwrap();
        assert!(js.contains("\"logit_margin\":\"inf\""), "{js}");
        let back: MarginReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);

        let two = fclass_model(1, 1);
        let r = analyze(&two, 16).unwrap();
        assert_eq!(r.complexity, Some(0.0));
        assert_eq!(r.positional_margin, Some(1.0));
        assert!(r.logit_margin.is_none());

        let three = LtParams::zeros(2, 2, 1, 0, &[1, 1, 1], 1);
        assert!(analyze(&three, 16).unwrap_err().is_shape());
    }

    #[test]
    fn hardmax_equivalence_on_grid_models() {
        // At the threshold, finite attention at the last position is uniform
        // over the maximal logits.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..30 {
            let m = grid_model(&mut rng, 3, 2, 1);
            let t = hardmax_threshold(&m, 16).unwrap() as usize;
            if t > 10_000 {
                continue;
            }
            let x = random_seq(&mut rng, 3, t.max(2));
            let tr = crate::lt::forward_trace(&m, PrecisionMode::finite(16), &x).unwrap();
            let n = x.len();
            let w = crate::lt::attention_distribution(&m, PrecisionMode::finite(16), &tr.states[0], 0, 0, n, n).unwrap();
            let logits: Vec<f64> = (1..=n)
                .map(|j| crate::lt::attention_logit(&m, PrecisionMode::finite(16), &tr.states[0], 0, 0, n, j).unwrap())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let count = logits.iter().filter(|&&a| mx - a <= TIE_TOL).count() as f64;
            for (wj, a) in w.iter().zip(&logits) {
                let want = if mx - a <= TIE_TOL { 1.0 / count } else { 0.0 };
                assert!((wj - want).abs() <= 1e-12);
            }
        }
    }
}
